use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the block-structured encoders shared by teachers and TargetNet.
///
/// Block `b` is two 3x3 convolutions with leaky-relu, the first of which has
/// stride 2 unless `b == 1 && !downsample_first`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub downsample_first: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            in_channels: 3,
            image_size: 32,
            widths: vec![16, 32, 64, 128],
            downsample_first: false,
        }
    }
}

impl ArchSpec {
    pub fn blocks(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("arch.widths must be nonempty and positive, got {:?}", self.widths)));
        }
        let mut size = self.image_size;
        for b in 1..=self.blocks() {
            if self.stride(b) == 2 {
                if size < 2 || size % 2 != 0 {
                    return Err(Error::Config(format!(
                        "image size {} cannot be halved at block {b}",
                        self.image_size
                    )));
                }
                size /= 2;
            }
        }
        Ok(())
    }

    /// Entry stride of block `b` (1-based).
    pub fn stride(&self, b: usize) -> usize {
        if b == 1 && !self.downsample_first {
            1
        } else {
            2
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_size, self.image_size]
    }

    /// Per-sample `[C, H, W]` produced by block `b`; block 0 is the image.
    pub fn block_output_shape(&self, b: usize) -> [usize; 3] {
        let mut size = self.image_size;
        for i in 1..=b {
            size /= self.stride(i);
        }
        if b == 0 {
            self.image_shape()
        } else {
            [self.widths[b - 1], size, size]
        }
    }

    /// Per-sample `[C, H, W]` consumed by block `b`.
    pub fn block_input_shape(&self, b: usize) -> [usize; 3] {
        self.block_output_shape(b - 1)
    }
}

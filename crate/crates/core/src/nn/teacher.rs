use rand::Rng;

use super::{join, ArchSpec, Block, Dense, Module};
use crate::autodiff::{Activation, Param, PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

/// Classification head: global average pool, dense, per-label sigmoid.
///
/// Counted as part of the last block.
#[derive(Clone, Debug)]
pub struct Head<T: Element = f32> {
    pub dense: Dense<T>,
}

impl<T: Element> Head<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, labels: usize, rng: &mut R) -> Self {
        Head {
            dense: Dense::new(channels, labels, rng),
        }
    }

    pub fn labels(&self) -> usize {
        self.dense.outputs()
    }

    /// Pooled `[N, C]` features and `[N, labels]` sigmoid scores.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, trainable: bool) -> Result<(Var, Var)> {
        let pooled = tape.pool(PoolKind::GlobalAvg, x, 1)?;
        let n = tape.shape(pooled)[0];
        let c = tape.shape(pooled)[1];
        if c != self.dense.inputs() {
            return Err(Error::shape("head", tape.shape(x), self.dense.weight.value.shape()));
        }
        let features = tape.reshape(pooled, &[n, c])?;
        let logits = self.dense.forward(tape, features, trainable)?;
        Ok((features, tape.elementwise(Activation::Sigmoid, logits)))
    }
}

impl<T: Element> Module<T> for Head<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.dense.visit_params(&join(prefix, "dense"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.dense.visit_params_mut(&join(prefix, "dense"), f);
    }
}

/// Pre-trained multi-label classifier split into `B` encoder blocks.
#[derive(Clone, Debug)]
pub struct TeacherNet<T: Element = f32> {
    pub arch: ArchSpec,
    pub blocks: Vec<Block<T>>,
    pub head: Head<T>,
    pub label_names: Vec<String>,
}

impl<T: Element> TeacherNet<T> {
    pub fn new<R: Rng + ?Sized>(arch: &ArchSpec, label_names: Vec<String>, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if label_names.is_empty() {
            return Err(Error::invalid("teacher", "a teacher needs at least one label"));
        }
        let blocks = encoder_blocks(arch, rng)?;
        let head = Head::new(*arch.widths.last().expect("validated"), label_names.len(), rng);
        Ok(TeacherNet {
            arch: arch.clone(),
            blocks,
            head,
            label_names,
        })
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn labels(&self) -> usize {
        self.label_names.len()
    }

    /// 1-based block accessor.
    pub fn block(&self, b: usize) -> &Block<T> {
        &self.blocks[b - 1]
    }

    /// Runs blocks `from..=to` (1-based, inclusive); an empty range is the identity.
    pub fn forward_blocks(&self, tape: &mut Tape<T>, x: Var, from: usize, to: usize, trainable: bool) -> Result<Var> {
        (from..=to).try_fold(x, |h, b| self.block(b).forward(tape, h, trainable))
    }

    /// Image to `(pooled features, label scores)`.
    pub fn forward(&self, tape: &mut Tape<T>, image: Var, trainable: bool) -> Result<(Var, Var)> {
        let h = self.forward_blocks(tape, image, 1, self.block_count(), trainable)?;
        self.head.forward(tape, h, trainable)
    }
}

pub(crate) fn encoder_blocks<T: Element, R: Rng + ?Sized>(arch: &ArchSpec, rng: &mut R) -> Result<Vec<Block<T>>> {
    (1..=arch.blocks())
        .map(|b| Block::encoder(b, arch.block_input_shape(b), arch.widths[b - 1], arch.stride(b), rng))
        .collect()
}

impl<T: Element> Module<T> for TeacherNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for b in &self.blocks {
            b.visit_params(&join(prefix, &format!("block{}", b.index)), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for b in &mut self.blocks {
            let idx = b.index;
            b.visit_params_mut(&join(prefix, &format!("block{idx}")), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

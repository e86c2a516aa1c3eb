use rand::Rng;

use super::teacher::encoder_blocks;
use super::{join, ArchSpec, Block, FilterBank, Module};
use crate::autodiff::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::pipeline::BranchPlan;
use crate::tensor::Element;

/// The dual generator `{T^1..T^B}`: encoder blocks with the teachers'
/// architecture plus one teacher-level filter per (block, teacher).
#[derive(Clone, Debug)]
pub struct TargetNet<T: Element = f32> {
    pub arch: ArchSpec,
    pub blocks: Vec<Block<T>>,
    pub filters: FilterBank<T>,
    trained_blocks: usize,
    pub branch_plan: Option<BranchPlan>,
}

impl<T: Element> TargetNet<T> {
    pub fn new<R: Rng + ?Sized>(arch: &ArchSpec, teachers: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if teachers == 0 {
            return Err(Error::invalid("target_net", "at least one teacher is required"));
        }
        let blocks = encoder_blocks(arch, rng)?;
        let filters = FilterBank::new(&arch.widths, teachers, reduction, rng);
        Ok(TargetNet {
            arch: arch.clone(),
            blocks,
            filters,
            trained_blocks: 0,
            branch_plan: None,
        })
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, b: usize) -> &Block<T> {
        &self.blocks[b - 1]
    }

    /// Number of leading blocks whose block-wise training has completed.
    pub fn trained_blocks(&self) -> usize {
        self.trained_blocks
    }

    pub(crate) fn mark_trained(&mut self, b: usize) {
        self.trained_blocks = self.trained_blocks.max(b);
    }

    /// Restores training progress after loading a checkpoint.
    pub fn set_trained_blocks(&mut self, b: usize) -> Result<()> {
        if b > self.block_count() {
            return Err(Error::invalid("target_net", format!("{b} trained blocks exceeds {}", self.block_count())));
        }
        self.trained_blocks = b;
        Ok(())
    }

    /// Runs blocks `1..=upto`; only `trainable_block` (if any) binds trainable weights.
    pub fn forward_prefix(
        &self,
        tape: &mut Tape<T>,
        image: Var,
        upto: usize,
        trainable_block: Option<usize>,
    ) -> Result<Var> {
        (1..=upto).try_fold(image, |h, b| self.block(b).forward(tape, h, trainable_block == Some(b)))
    }
}

impl<T: Element> Module<T> for TargetNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for b in &self.blocks {
            b.visit_params(&join(prefix, &format!("block{}", b.index)), f);
        }
        self.filters.visit_params(&join(prefix, "filter"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for b in &mut self.blocks {
            let idx = b.index;
            b.visit_params_mut(&join(prefix, &format!("block{idx}")), f);
        }
        self.filters.visit_params_mut(&join(prefix, "filter"), f);
    }
}

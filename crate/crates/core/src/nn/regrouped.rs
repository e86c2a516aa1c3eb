use super::{join, Block, Head, Module, TaskFilter, TeacherFilter};
use crate::autodiff::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::pipeline::BranchPlan;
use crate::tensor::Element;

/// Task-specific tail of the hierarchical TargetNet for one teacher.
///
/// Applied after the shared trunk: private student blocks up to the
/// branch-out point, the kept teacher-level filter, grafted teacher blocks,
/// the teacher head and the task-level filter.
#[derive(Clone, Debug)]
pub struct Branch<T: Element = f32> {
    pub teacher: usize,
    pub split: usize,
    pub student_blocks: Vec<Block<T>>,
    pub filter: TeacherFilter<T>,
    pub teacher_blocks: Vec<Block<T>>,
    pub head: Head<T>,
    pub task: TaskFilter,
}

impl<T: Element> Branch<T> {
    /// Branch tail on a trunk output.
    pub fn forward(&self, tape: &mut Tape<T>, trunk_out: Var, trainable: bool) -> Result<Var> {
        let mut h = trunk_out;
        for b in &self.student_blocks {
            h = b.forward(tape, h, trainable)?;
        }
        h = self.filter.apply(tape, h, trainable)?;
        for b in &self.teacher_blocks {
            h = b.forward(tape, h, trainable)?;
        }
        let (_, scores) = self.head.forward(tape, h, trainable)?;
        self.task.apply(tape, scores)
    }
}

impl<T: Element> Module<T> for Branch<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for b in &self.student_blocks {
            b.visit_params(&join(prefix, &format!("block{}", b.index)), f);
        }
        self.filter.visit_params(&join(prefix, "filter"), f);
        for b in &self.teacher_blocks {
            b.visit_params(&join(prefix, &format!("teacher_block{}", b.index)), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for b in &mut self.student_blocks {
            let idx = b.index;
            b.visit_params_mut(&join(prefix, &format!("block{idx}")), f);
        }
        self.filter.visit_params_mut(&join(prefix, "filter"), f);
        for b in &mut self.teacher_blocks {
            let idx = b.index;
            b.visit_params_mut(&join(prefix, &format!("teacher_block{idx}")), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

/// Hierarchical TargetNet: a trunk of the first `min S` student blocks,
/// stored once, followed by one branch per teacher.
#[derive(Clone, Debug)]
pub struct RegroupedNet<T: Element = f32> {
    pub trunk: Vec<Block<T>>,
    pub branches: Vec<Branch<T>>,
    pub plan: BranchPlan,
}

impl<T: Element> RegroupedNet<T> {
    pub fn trunk_forward(&self, tape: &mut Tape<T>, image: Var, trainable: bool) -> Result<Var> {
        self.trunk.iter().try_fold(image, |h, b| b.forward(tape, h, trainable))
    }

    /// Task-filtered scores of every branch; the trunk runs once.
    pub fn forward(&self, tape: &mut Tape<T>, image: Var, trainable: bool) -> Result<Vec<Var>> {
        let shared = self.trunk_forward(tape, image, trainable)?;
        self.branches.iter().map(|b| b.forward(tape, shared, trainable)).collect()
    }

    /// Scores of branch `m` (1-based) only.
    pub fn forward_branch(&self, tape: &mut Tape<T>, image: Var, m: usize, trainable: bool) -> Result<Var> {
        let branch = self
            .branches
            .get(m.wrapping_sub(1))
            .ok_or_else(|| Error::invalid("regrouped", format!("no branch {m}")))?;
        let shared = self.trunk_forward(tape, image, trainable)?;
        branch.forward(tape, shared, trainable)
    }
}

impl<T: Element> Module<T> for RegroupedNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for b in &self.trunk {
            b.visit_params(&join(prefix, &format!("trunk.block{}", b.index)), f);
        }
        for br in &self.branches {
            br.visit_params(&join(prefix, &format!("branch{}", br.teacher)), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for b in &mut self.trunk {
            let idx = b.index;
            b.visit_params_mut(&join(prefix, &format!("trunk.block{idx}")), f);
        }
        for br in &mut self.branches {
            let m = br.teacher;
            br.visit_params_mut(&join(prefix, &format!("branch{m}")), f);
        }
    }
}

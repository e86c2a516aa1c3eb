//! Discriminators built from frozen teacher blocks.
//!
//! Group `j` of the generator is judged by teacher blocks `B-j+1..=B`; block
//! `b` of the dual generator by teacher blocks `b+1..=B`. Both always end
//! with the teacher head so the output lives in label space.

use super::TeacherNet;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

/// Teacher block indices (1-based) judging generator group `j`.
pub fn discriminator_blocks(block_count: usize, j: usize) -> Result<Vec<usize>> {
    if j < 1 || j > block_count {
        return Err(Error::invalid(
            "assemble_discriminator",
            format!("group {j} outside [1, {block_count}]"),
        ));
    }
    Ok((1..=j).map(|i| block_count - j + i).collect())
}

/// Teacher block indices (1-based) judging dual-generator block `b`.
pub fn dual_discriminator_blocks(block_count: usize, b: usize) -> Result<Vec<usize>> {
    if b < 1 || b > block_count {
        return Err(Error::invalid(
            "assemble_dual_discriminator",
            format!("block {b} outside [1, {block_count}]"),
        ));
    }
    Ok((1..=block_count - b).map(|i| b + i).collect())
}

/// A read-only composition of contiguous teacher blocks plus the head.
#[derive(Clone, Copy, Debug)]
pub struct Discriminator<'a, T: Element = f32> {
    teacher: &'a TeacherNet<T>,
    first: usize,
}

impl<'a, T: Element> Discriminator<'a, T> {
    fn from_blocks(teacher: &'a TeacherNet<T>, blocks: &[usize]) -> Self {
        Discriminator {
            teacher,
            first: blocks.first().copied().unwrap_or(teacher.block_count() + 1),
        }
    }

    /// Indices of the teacher blocks applied before the head.
    pub fn blocks(&self) -> Vec<usize> {
        (self.first..=self.teacher.block_count()).collect()
    }

    pub fn teacher(&self) -> &'a TeacherNet<T> {
        self.teacher
    }

    /// `(pre-head pooled features, label scores)`; teacher weights are bound
    /// as constants.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let h = self
            .teacher
            .forward_blocks(tape, x, self.first, self.teacher.block_count(), false)?;
        self.teacher.head.forward(tape, h, false)
    }
}

/// `D^j`: teacher blocks `B-j+1..=B` and the head.
pub fn assemble_discriminator<T: Element>(teacher: &TeacherNet<T>, j: usize) -> Result<Discriminator<'_, T>> {
    let blocks = discriminator_blocks(teacher.block_count(), j)?;
    Ok(Discriminator::from_blocks(teacher, &blocks))
}

/// `D_dual^b`: teacher blocks `b+1..=B` and the head (head only for `b = B`).
pub fn assemble_dual_discriminator<T: Element>(teacher: &TeacherNet<T>, b: usize) -> Result<Discriminator<'_, T>> {
    let blocks = dual_discriminator_blocks(teacher.block_count(), b)?;
    Ok(Discriminator::from_blocks(teacher, &blocks))
}

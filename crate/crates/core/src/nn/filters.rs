use rand::Rng;

use super::{join, Dense, Module};
use crate::autodiff::{Activation, Param, PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Initial gate bias; `sigmoid(3) ~ 0.95`, so a fresh filter is close to the identity.
const GATE_BIAS_INIT: f64 = 3.0;

/// Teacher-level filter: global pooling and two dense layers producing a
/// per-channel gate in `(0, 1)` that rescales the input map.
#[derive(Clone, Debug)]
pub struct TeacherFilter<T: Element = f32> {
    pub squeeze: Dense<T>,
    pub excite: Dense<T>,
}

impl<T: Element> TeacherFilter<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        let mut excite = Dense::new(hidden, channels, rng);
        excite.bias.value = Tensor::filled(&[channels], T::lit(GATE_BIAS_INIT));
        TeacherFilter {
            squeeze: Dense::new(channels, hidden, rng),
            excite,
        }
    }

    pub fn channels(&self) -> usize {
        self.squeeze.inputs()
    }

    /// The `[N, C]` gate for an `[N, C, H, W]` map.
    pub fn gate(&self, tape: &mut Tape<T>, x: Var, trainable: bool) -> Result<Var> {
        let (n, c) = (tape.shape(x)[0], tape.shape(x).get(1).copied().unwrap_or(0));
        if tape.shape(x).len() != 4 || c != self.channels() {
            return Err(Error::shape("teacher_filter", tape.shape(x), &[n, self.channels(), 0, 0]));
        }
        let pooled = tape.pool(PoolKind::GlobalAvg, x, 1)?;
        let pooled = tape.reshape(pooled, &[n, c])?;
        let h = self.squeeze.forward(tape, pooled, trainable)?;
        let h = tape.elementwise(Activation::Relu, h);
        let g = self.excite.forward(tape, h, trainable)?;
        Ok(tape.elementwise(Activation::Sigmoid, g))
    }

    pub fn apply(&self, tape: &mut Tape<T>, x: Var, trainable: bool) -> Result<Var> {
        let g = self.gate(tape, x, trainable)?;
        tape.channel_gate(x, g)
    }
}

impl<T: Element> Module<T> for TeacherFilter<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.squeeze.visit_params(&join(prefix, "squeeze"), f);
        self.excite.visit_params(&join(prefix, "excite"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.squeeze.visit_params_mut(&join(prefix, "squeeze"), f);
        self.excite.visit_params_mut(&join(prefix, "excite"), f);
    }
}

/// Teacher filters indexed by (stage, teacher), both 1-based.
#[derive(Clone, Debug)]
pub struct FilterBank<T: Element = f32> {
    filters: Vec<Vec<TeacherFilter<T>>>,
}

impl<T: Element> FilterBank<T> {
    /// One filter per teacher for every stage channel count in `channels`.
    pub fn new<R: Rng + ?Sized>(channels: &[usize], teachers: usize, reduction: usize, rng: &mut R) -> Self {
        let filters = channels
            .iter()
            .map(|&c| (0..teachers).map(|_| TeacherFilter::new(c, reduction, rng)).collect())
            .collect();
        FilterBank { filters }
    }

    pub fn stages(&self) -> usize {
        self.filters.len()
    }

    pub fn teachers(&self) -> usize {
        self.filters.first().map_or(0, Vec::len)
    }

    pub fn get(&self, stage: usize, teacher: usize) -> Result<&TeacherFilter<T>> {
        self.filters
            .get(stage.wrapping_sub(1))
            .and_then(|row| row.get(teacher.wrapping_sub(1)))
            .ok_or_else(|| Error::invalid("filter_bank", format!("no filter for stage {stage}, teacher {teacher}")))
    }

    /// Filters of one stage, for every teacher.
    pub fn stage(&self, stage: usize) -> &[TeacherFilter<T>] {
        &self.filters[stage - 1]
    }

    pub fn stage_mut(&mut self, stage: usize) -> &mut [TeacherFilter<T>] {
        &mut self.filters[stage - 1]
    }
}

impl<T: Element> Module<T> for FilterBank<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (s, row) in self.filters.iter().enumerate() {
            for (m, filt) in row.iter().enumerate() {
                filt.visit_params(&join(prefix, &format!("s{}.t{}", s + 1, m + 1)), f);
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (s, row) in self.filters.iter_mut().enumerate() {
            for (m, filt) in row.iter_mut().enumerate() {
                filt.visit_params_mut(&join(prefix, &format!("s{}.t{}", s + 1, m + 1)), f);
            }
        }
    }
}

/// Task-level filter `g_m`: the columns of teacher `m`'s predictions that
/// belong to the customised label set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskFilter {
    indices: Vec<usize>,
    width: usize,
}

impl TaskFilter {
    pub fn new(mut indices: Vec<usize>, width: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("task_filter", format!("duplicate label index in {indices:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= width) {
            return Err(Error::invalid("task_filter", format!("label index {bad} outside [0, {width})")));
        }
        Ok(TaskFilter { indices, width })
    }

    pub fn all(width: usize) -> Self {
        TaskFilter {
            indices: (0..width).collect(),
            width,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::shape("task_filter", shape, &[shape[0], self.width]));
        }
        if self.indices.is_empty() {
            return Err(Error::invalid("task_filter", "selects no labels"));
        }
        Ok(())
    }

    pub fn apply<T: Element>(&self, tape: &mut Tape<T>, predictions: Var) -> Result<Var> {
        self.check(tape.shape(predictions))?;
        tape.select_columns(predictions, &self.indices)
    }

    pub fn apply_tensor<T: Element>(&self, predictions: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(predictions.shape())?;
        let n = predictions.batch();
        let d = self.width;
        let data = predictions.data();
        let out = (0..n)
            .flat_map(|r| self.indices.iter().map(move |&i| data[r * d + i]))
            .collect();
        Tensor::new(&[n, self.indices.len()], out)
    }
}

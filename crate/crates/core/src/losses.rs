//! Generator-side and dual-generator losses.
//!
//! All terms are recorded on a [`Tape`] so they can be differentiated
//! end to end. Soft targets (teacher predictions on generated images,
//! image-branch predictions) enter as constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::TaskFilter;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Label threshold.
    pub epsilon: f64,
    /// Activation-loss weight.
    pub alpha: f64,
    /// Information-entropy weight.
    pub beta: f64,
    /// Discrete-loss weight; may be negative to flip the sparsity direction.
    pub gamma: f64,
    /// Per-teacher weights; empty means 1 for every teacher.
    pub lambda_m: Vec<f64>,
    pub lambda_in1: f64,
    pub lambda_in2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.5,
            alpha: 0.1,
            beta: 5.0,
            gamma: -1.0,
            lambda_m: Vec::new(),
            lambda_in1: 1.0,
            lambda_in2: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        let named = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_in1", self.lambda_in1),
            ("lambda_in2", self.lambda_in2),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite".into()));
        }
        if self.lambda_m.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("lambda_m must be nonnegative, got {:?}", self.lambda_m)));
        }
        Ok(())
    }

    /// Weight of teacher `m` (0-based).
    pub fn lambda(&self, m: usize) -> f64 {
        self.lambda_m.get(m).copied().unwrap_or(1.0)
    }
}

/// `t_i = 1` iff `y_i >= epsilon`.
pub fn threshold_labels<T: Element>(y: &Tensor<T>, epsilon: f64) -> Tensor<T> {
    let eps = T::lit(epsilon);
    y.map(|v| if v >= eps { T::one() } else { T::zero() })
}

fn check_probabilities<T: Element>(op: &'static str, y: &Tensor<T>) -> Result<()> {
    if let Some(bad) = y.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::Domain {
            op,
            detail: format!("prediction {bad} outside [0, 1]"),
        });
    }
    Ok(())
}

/// Per-label cross-entropy against the thresholded predictions, averaged
/// over labels and batch.
pub fn one_hot_loss<T: Element>(tape: &mut Tape<T>, y: Var, epsilon: f64) -> Result<Var> {
    check_probabilities("one_hot_loss", tape.value(y))?;
    let targets = threshold_labels(tape.value(y), epsilon);
    tape.bce_mean(y, &targets)
}

/// `-(1/C) sum_i |y_i|`, averaged over the batch.
pub fn discrete_loss<T: Element>(tape: &mut Tape<T>, y: Var) -> Var {
    let m = tape.mean_abs(y);
    tape.scale(m, -T::one())
}

/// Negative mean absolute activation of the pre-head features.
pub fn activation_loss<T: Element>(tape: &mut Tape<T>, features: Var) -> Var {
    let m = tape.mean_abs(features);
    tape.scale(m, -T::one())
}

/// Negative entropy of the batch-mean label distribution; minimal (`-ln C`)
/// when every label is predicted equally often.
pub fn info_entropy_loss<T: Element>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    check_probabilities("info_entropy_loss", tape.value(y))?;
    tape.batch_mean_neg_entropy(y)
}

/// The four weighted terms of the adversarial generator loss.
#[derive(Clone, Copy, Debug)]
pub struct GanLoss {
    pub total: Var,
    pub one_hot: Var,
    pub activation: Var,
    pub info_entropy: Var,
    pub discrete: Var,
}

/// `L_oh + alpha L_a + beta L_ie + gamma L_dis` on concatenated teacher
/// predictions and pre-head features.
pub fn gan_loss<T: Element>(tape: &mut Tape<T>, predictions: Var, features: Var, cfg: &LossConfig) -> Result<GanLoss> {
    let one_hot = one_hot_loss(tape, predictions, cfg.epsilon)?;
    let activation = activation_loss(tape, features);
    let info_entropy = info_entropy_loss(tape, predictions)?;
    let discrete = discrete_loss(tape, predictions);
    let a = tape.scale(activation, T::lit(cfg.alpha));
    let ie = tape.scale(info_entropy, T::lit(cfg.beta));
    let d = tape.scale(discrete, T::lit(cfg.gamma));
    let total = tape.add_all(&[one_hot, a, ie, d])?;
    Ok(GanLoss {
        total,
        one_hot,
        activation,
        info_entropy,
        discrete,
    })
}

/// Discriminator outputs for one generator group, concatenated over teachers.
#[derive(Clone, Copy, Debug)]
pub struct GroupOutput {
    pub features: Var,
    pub predictions: Var,
}

#[derive(Clone, Debug)]
pub struct JointLoss {
    pub total: Var,
    /// Adversarial loss of every group; only the last enters `total`.
    pub per_group: Vec<GanLoss>,
    /// Mean cross-entropy of intermediate-group predictions against the
    /// image-group predictions; `None` when there is a single group.
    pub consistency: Option<Var>,
}

/// `L_gan^B + 1/(B-1) sum_{j<B} l(O(F^j), O(I))` with `O(I)` held constant.
pub fn joint_generator_loss<T: Element>(tape: &mut Tape<T>, groups: &[GroupOutput], cfg: &LossConfig) -> Result<JointLoss> {
    let (image, intermediate) = groups
        .split_last()
        .ok_or_else(|| Error::invalid("joint_generator_loss", "no generator groups"))?;
    let per_group = groups
        .iter()
        .map(|g| gan_loss(tape, g.predictions, g.features, cfg))
        .collect::<Result<Vec<_>>>()?;
    let adversarial = per_group.last().expect("nonempty").total;
    if intermediate.is_empty() {
        return Ok(JointLoss {
            total: adversarial,
            per_group,
            consistency: None,
        });
    }
    let target = tape.value(image.predictions).clone();
    let terms = intermediate
        .iter()
        .map(|g| tape.bce_mean(g.predictions, &target))
        .collect::<Result<Vec<_>>>()?;
    let summed = tape.add_all(&terms)?;
    let consistency = tape.scale(summed, T::lit(1.0 / intermediate.len() as f64));
    let total = tape.add(adversarial, consistency)?;
    Ok(JointLoss {
        total,
        per_group,
        consistency: Some(consistency),
    })
}

/// Cross-entropy of task-filtered student predictions against task-filtered
/// teacher predictions on the generated image.
pub fn dual_branch_loss<T: Element>(
    tape: &mut Tape<T>,
    student: Var,
    teacher: &Tensor<T>,
    task: &TaskFilter,
) -> Result<Var> {
    if task.is_empty() {
        return Err(Error::invalid("dual_branch_loss", "task filter selects no labels"));
    }
    if tape.shape(student) != teacher.shape() {
        return Err(Error::shape("dual_branch_loss", tape.shape(student), teacher.shape()));
    }
    let selected = task.apply(tape, student)?;
    let target = task.apply_tensor(teacher)?;
    tape.bce_mean(selected, &target)
}

/// `lambda_in1 sum_m lambda_m L^{b,m}(F_in^1) + lambda_in2 sum_m lambda_m L^{b,m}(F_in^2)`.
///
/// A stream whose weight is zero may be passed empty.
pub fn dual_block_loss<T: Element>(tape: &mut Tape<T>, stream1: &[Var], stream2: &[Var], cfg: &LossConfig) -> Result<Var> {
    if cfg.lambda_in1 == 0.0 && cfg.lambda_in2 == 0.0 {
        return Err(Error::invalid("dual_block_loss", "both stream weights are zero"));
    }
    let mut terms = Vec::new();
    for (weight, stream) in [(cfg.lambda_in1, stream1), (cfg.lambda_in2, stream2)] {
        if weight == 0.0 {
            continue;
        }
        if stream.is_empty() {
            return Err(Error::invalid("dual_block_loss", "missing losses for a weighted stream"));
        }
        for (m, &l) in stream.iter().enumerate() {
            terms.push(tape.scale(l, T::lit(weight * cfg.lambda(m))));
        }
    }
    tape.add_all(&terms)
}

use rand::Rng;

use super::log::{LogRow, TrainingLog};
use super::optim::{Optimizer, Schedule};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{joint_generator_loss, GroupOutput, LossConfig};
use crate::nn::{assemble_discriminator, ArchSpec, FilterBank, GeneratorStack, Module, TeacherNet};
use crate::tensor::Tensor;

/// Teacher-level filters `f_m^j` for the generator groups.
pub fn generator_filters<R: Rng + ?Sized>(arch: &ArchSpec, teachers: usize, reduction: usize, rng: &mut R) -> FilterBank {
    let channels: Vec<usize> = (1..=arch.blocks())
        .map(|j| GeneratorStack::<f32>::target_shape(arch, j)[0])
        .collect();
    FilterBank::new(&channels, teachers, reduction, rng)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GeneratorOptions {
    /// Discriminate the image only: no intermediate groups, no consistency term.
    pub image_level_only: bool,
}

pub(crate) fn check_teachers(teachers: &[TeacherNet], blocks: usize, op: &'static str) -> Result<()> {
    if teachers.is_empty() {
        return Err(Error::invalid(op, "no teachers"));
    }
    if let Some(t) = teachers.iter().find(|t| t.block_count() != blocks || t.arch.image_size != teachers[0].arch.image_size) {
        return Err(Error::invalid(
            op,
            format!("teacher with {} blocks does not match the {blocks}-block generator", t.block_count()),
        ));
    }
    Ok(())
}

pub(crate) fn ensure_finite(stage: &'static str, iteration: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            stage: stage.into(),
            iteration,
            value,
        })
    }
}

/// Step I: jointly trains every generator group and every teacher-level
/// filter against fixed teacher discriminators.
pub fn train_generator<R: Rng + ?Sized>(
    generator: &mut GeneratorStack,
    filters: &mut FilterBank,
    teachers: &[TeacherNet],
    cfg: &LossConfig,
    schedule: &Schedule,
    options: GeneratorOptions,
    rng: &mut R,
    log: &mut TrainingLog,
) -> Result<()> {
    cfg.validate()?;
    schedule.validate()?;
    let b_total = generator.group_count();
    check_teachers(teachers, b_total, "train_generator")?;
    if filters.stages() != b_total || filters.teachers() != teachers.len() {
        return Err(Error::invalid("train_generator", "filter bank does not cover every (group, teacher)"));
    }
    let mut opt = Optimizer::new(schedule.optim.clone());
    let first_group = if options.image_level_only { b_total } else { 1 };
    for it in 0..schedule.iterations {
        let lr = schedule.optim.lr_at(it, schedule.iterations);
        let mut tape = Tape::new();
        let z = tape.constant(generator.sample_noise(schedule.batch_size, rng));
        let feats = generator.forward(&mut tape, z, true)?;
        let mut groups = Vec::with_capacity(b_total);
        for j in first_group..=b_total {
            let mut fs = Vec::with_capacity(teachers.len());
            let mut ps = Vec::with_capacity(teachers.len());
            for (m, teacher) in teachers.iter().enumerate() {
                let filtered = filters.get(j, m + 1)?.apply(&mut tape, feats[j - 1], true)?;
                let (f, p) = assemble_discriminator(teacher, j)?.forward(&mut tape, filtered)?;
                fs.push(f);
                ps.push(p);
            }
            groups.push(GroupOutput {
                features: tape.concat_columns(&fs)?,
                predictions: tape.concat_columns(&ps)?,
            });
        }
        let joint = joint_generator_loss(&mut tape, &groups, cfg)?;
        let total = tape.scalar(joint.total) as f64;
        ensure_finite("generator", it, total)?;
        tape.backward(joint.total)?;
        opt.begin_step();
        opt.update(generator, &tape, lr);
        opt.update(filters, &tape, lr);
        let image = joint.per_group.last().expect("nonempty");
        let value = |v| Some(tape.scalar(v) as f64);
        log.push(LogRow {
            step: "generator",
            block: 0,
            iteration: it,
            lr,
            total,
            one_hot: value(image.one_hot),
            activation: value(image.activation),
            info_entropy: value(image.info_entropy),
            discrete: value(image.discrete),
            consistency: joint.consistency.and_then(value),
            per_teacher: Vec::new(),
        });
    }
    generator.set_trained(true);
    Ok(())
}

/// `{F_gan^1 .. F_gan^{B-1}, I_gan}` for a noise batch, detached from any tape.
pub fn synthesize_training_set(generator: &GeneratorStack, z: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let feats = generator.forward(&mut tape, zv, false)?;
    feats
        .into_iter()
        .map(|v| Tensor::new(tape.shape(v), tape.value(v).data().to_vec()))
        .collect()
}

/// Generated images only.
pub fn synthesize_images(generator: &GeneratorStack, z: &Tensor) -> Result<Tensor> {
    Ok(synthesize_training_set(generator, z)?.pop().expect("at least one group"))
}

/// Hashes of every teacher, used to confirm that training leaves them intact.
pub fn teacher_hashes(teachers: &[TeacherNet]) -> Vec<u64> {
    teachers.iter().map(|t| t.param_hash()).collect()
}

use rand::Rng;

use super::branch::ConvergenceRecord;
use super::generator::{check_teachers, ensure_finite, synthesize_training_set};
use super::log::{LogRow, TrainingLog};
use super::optim::{Optimizer, Schedule};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{dual_block_loss, dual_branch_loss, LossConfig};
use crate::nn::{assemble_dual_discriminator, GeneratorStack, TargetNet, TaskFilter, TeacherNet};
use crate::tensor::Tensor;

/// Full teacher predictions on a batch, off-tape.
pub fn teacher_predictions(teacher: &TeacherNet, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let (_, p) = teacher.forward(&mut tape, x, false)?;
    Ok(tape.value(p).clone())
}

/// Step II for block `b`: trains `T^b` and the filters `f_m^b` on both
/// input streams while the generator and blocks `1..b-1` stay fixed.
///
/// Returns `eta^{b,m}` per teacher: the mean stream-weighted loss over the
/// last `window` iterations.
#[allow(clippy::too_many_arguments)]
pub fn train_dual_block<R: Rng + ?Sized>(
    target: &mut TargetNet,
    b: usize,
    generator: &GeneratorStack,
    teachers: &[TeacherNet],
    tasks: &[TaskFilter],
    cfg: &LossConfig,
    schedule: &Schedule,
    window: usize,
    rng: &mut R,
    log: &mut TrainingLog,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    schedule.validate()?;
    let b_total = target.block_count();
    if !generator.is_trained() {
        return Err(Error::Ordering("Step II needs a trained generator".into()));
    }
    if b == 0 || b > b_total {
        return Err(Error::invalid("train_dual_block", format!("block {b} outside [1, {b_total}]")));
    }
    if target.trained_blocks() + 1 < b {
        return Err(Error::Ordering(format!(
            "block {b} requested but only {} blocks are trained",
            target.trained_blocks()
        )));
    }
    if generator.group_count() != b_total {
        return Err(Error::invalid("train_dual_block", "generator and target differ in block count"));
    }
    check_teachers(teachers, b_total, "train_dual_block")?;
    if tasks.len() != teachers.len() || target.filters.teachers() != teachers.len() {
        return Err(Error::invalid("train_dual_block", "one task filter and filter column per teacher is required"));
    }
    if schedule.iterations == 0 {
        return Err(Error::invalid("train_dual_block", "at least one iteration is needed to measure convergence"));
    }
    let streams: Vec<(usize, f64)> = [(1, cfg.lambda_in1), (2, cfg.lambda_in2)]
        .into_iter()
        .filter(|&(_, w)| w != 0.0)
        .collect();
    let weight_sum: f64 = streams.iter().map(|&(_, w)| w).sum();
    let mut opt = Optimizer::new(schedule.optim.clone());
    let mut history: Vec<Vec<f64>> = Vec::with_capacity(schedule.iterations);
    for it in 0..schedule.iterations {
        let lr = schedule.optim.lr_at(it, schedule.iterations);
        let z = generator.sample_noise(schedule.batch_size, rng);
        let mut features = synthesize_training_set(generator, &z)?;
        let image = features.last().expect("nonempty").clone();
        let targets = teachers
            .iter()
            .map(|t| teacher_predictions(t, &image))
            .collect::<Result<Vec<_>>>()?;

        let mut tape = Tape::new();
        let mut per_stream: [Vec<_>; 2] = [Vec::new(), Vec::new()];
        for &(stream, _) in &streams {
            let input = if stream == 1 {
                let img = tape.constant(image.clone());
                target.forward_prefix(&mut tape, img, b - 1, None)?
            } else {
                tape.constant(std::mem::replace(&mut features[b_total - b], Tensor::scalar(0.0)))
            };
            let out = target.block(b).forward(&mut tape, input, true)?;
            for (m, teacher) in teachers.iter().enumerate() {
                let filtered = target.filters.get(b, m + 1)?.apply(&mut tape, out, true)?;
                let (_, preds) = assemble_dual_discriminator(teacher, b)?.forward(&mut tape, filtered)?;
                per_stream[stream - 1].push(dual_branch_loss(&mut tape, preds, &targets[m], &tasks[m])?);
            }
        }
        let total = dual_block_loss(&mut tape, &per_stream[0], &per_stream[1], cfg)?;
        let total_value = tape.scalar(total) as f64;
        ensure_finite("dual", it, total_value)?;
        tape.backward(total)?;
        opt.begin_step();
        opt.update(&mut target.blocks[b - 1], &tape, lr);
        for f in target.filters.stage_mut(b) {
            opt.update(f, &tape, lr);
        }
        let per_teacher: Vec<f64> = (0..teachers.len())
            .map(|m| {
                streams
                    .iter()
                    .map(|&(s, w)| w * tape.scalar(per_stream[s - 1][m]) as f64)
                    .sum::<f64>()
                    / weight_sum
            })
            .collect();
        log.push(LogRow {
            step: "dual",
            block: b,
            iteration: it,
            lr,
            total: total_value,
            per_teacher: per_teacher.clone(),
            ..LogRow::default()
        });
        history.push(per_teacher);
    }
    target.mark_trained(b);
    let w = window.clamp(1, history.len());
    let tail = &history[history.len() - w..];
    Ok((0..teachers.len())
        .map(|m| tail.iter().map(|row| row[m]).sum::<f64>() / w as f64)
        .collect())
}

/// Step II over every block in order.
#[allow(clippy::too_many_arguments)]
pub fn train_dual<R: Rng + ?Sized>(
    target: &mut TargetNet,
    generator: &GeneratorStack,
    teachers: &[TeacherNet],
    tasks: &[TaskFilter],
    cfg: &LossConfig,
    schedule: &Schedule,
    window: usize,
    rng: &mut R,
    log: &mut TrainingLog,
) -> Result<ConvergenceRecord> {
    let mut record = ConvergenceRecord::new(target.block_count(), teachers.len(), window);
    for b in 1..=target.block_count() {
        let eta = train_dual_block(target, b, generator, teachers, tasks, cfg, schedule, window, rng, log)?;
        for (m, v) in eta.into_iter().enumerate() {
            record.set(b, m + 1, v)?;
        }
    }
    Ok(record)
}

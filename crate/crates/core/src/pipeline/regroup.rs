use rand::Rng;

use super::branch::BranchPlan;
use super::dual::teacher_predictions;
use super::generator::{ensure_finite, synthesize_images};
use super::log::{LogRow, TrainingLog};
use super::optim::{Optimizer, Schedule};
use crate::autodiff::Tape;
use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::nn::{Branch, GeneratorStack, RegroupedNet, TargetNet, TaskFilter, TeacherNet};
use crate::tensor::Tensor;

/// Step III: assembles the hierarchical TargetNet from the trained dual
/// generator, the teachers and a branch plan.
///
/// Branch `m` keeps student blocks up to `S[m]`, the filter `f_m^{S[m]}`,
/// copies of teacher blocks `S[m]+1..B` and the teacher head, then `g_m`.
pub fn regroup(target: &TargetNet, teachers: &[TeacherNet], tasks: &[TaskFilter], plan: &BranchPlan) -> Result<RegroupedNet> {
    let b_total = target.block_count();
    if target.trained_blocks() < b_total {
        return Err(Error::Ordering(format!(
            "regrouping needs all {b_total} blocks trained, found {}",
            target.trained_blocks()
        )));
    }
    if plan.block_count() != b_total {
        return Err(Error::invalid("regroup", format!("plan for {} blocks, network has {b_total}", plan.block_count())));
    }
    if plan.teachers() != teachers.len() || tasks.len() != teachers.len() {
        return Err(Error::invalid("regroup", "plan, teachers and task filters disagree on the teacher count"));
    }
    let shared = plan.shared_depth();
    let trunk = target.blocks[..shared].to_vec();
    let mut branches = Vec::with_capacity(teachers.len());
    for (i, teacher) in teachers.iter().enumerate() {
        let m = i + 1;
        let split = plan.split(m);
        if teacher.block_count() != b_total {
            return Err(Error::invalid("regroup", format!("teacher {m} has {} blocks", teacher.block_count())));
        }
        if tasks[i].width() != teacher.labels() {
            return Err(Error::invalid("regroup", format!("task filter {m} does not match the teacher's labels")));
        }
        let filter = target
            .filters
            .get(split, m)
            .map_err(|_| Error::invalid("regroup", format!("plan references missing filter f_{m}^{split}")))?
            .clone();
        branches.push(Branch {
            teacher: m,
            split,
            student_blocks: target.blocks[shared..split].to_vec(),
            filter,
            teacher_blocks: teacher.blocks[split..].to_vec(),
            head: teacher.head.clone(),
            task: tasks[i].clone(),
        });
    }
    Ok(RegroupedNet {
        trunk,
        branches,
        plan: plan.clone(),
    })
}

/// Where training images come from.
pub enum ImageSource<'a> {
    Generator(&'a GeneratorStack),
    /// Uniform noise in `[-1, 1]`.
    UniformNoise { shape: [usize; 3] },
    Dataset(&'a SyntheticDataset),
    /// A fixed image pool sampled with replacement.
    Pool(&'a Tensor),
}

impl ImageSource<'_> {
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        match self {
            ImageSource::Generator(g) => synthesize_images(g, &g.sample_noise(n, rng)),
            ImageSource::UniformNoise { shape } => Ok(Tensor::uniform(&[n, shape[0], shape[1], shape[2]], -1.0, 1.0, rng)),
            ImageSource::Dataset(d) => {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..d.len())).collect();
                d.images.gather_batch(&idx)
            }
            ImageSource::Pool(p) => {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..p.batch())).collect();
                p.gather_batch(&idx)
            }
        }
    }
}

/// Trains every branch of `net` against task-filtered teacher soft targets,
/// summing the per-branch cross-entropies. All parameters of `net` train;
/// the reference teachers do not.
#[allow(clippy::too_many_arguments)]
pub fn train_branches<R: Rng + ?Sized>(
    net: &mut RegroupedNet,
    source: &ImageSource,
    teachers: &[TeacherNet],
    schedule: &Schedule,
    step: &'static str,
    rng: &mut R,
    log: &mut TrainingLog,
) -> Result<()> {
    schedule.validate()?;
    if net.branches.len() != teachers.len() {
        return Err(Error::invalid("train_branches", "one teacher per branch is required"));
    }
    let mut opt = Optimizer::new(schedule.optim.clone());
    for it in 0..schedule.iterations {
        let lr = schedule.optim.lr_at(it, schedule.iterations);
        let images = source.draw(schedule.batch_size, rng)?;
        let targets = net
            .branches
            .iter()
            .zip(teachers)
            .map(|(br, t)| br.task.apply_tensor(&teacher_predictions(t, &images)?))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let outs = net.forward(&mut tape, x, true)?;
        let losses = outs
            .iter()
            .zip(&targets)
            .map(|(&o, t)| tape.bce_mean(o, t))
            .collect::<Result<Vec<_>>>()?;
        let total = tape.add_all(&losses)?;
        let total_value = tape.scalar(total) as f64;
        ensure_finite(step, it, total_value)?;
        tape.backward(total)?;
        opt.begin_step();
        opt.update(net, &tape, lr);
        log.push(LogRow {
            step,
            iteration: it,
            lr,
            total: total_value,
            per_teacher: losses.iter().map(|&l| tape.scalar(l) as f64).collect(),
            ..LogRow::default()
        });
    }
    Ok(())
}

/// Fine-tunes the regrouped network on synthesized images, drawn fresh
/// each iteration unless `pool` is given.
pub fn fine_tune<R: Rng + ?Sized>(
    net: &mut RegroupedNet,
    generator: &GeneratorStack,
    teachers: &[TeacherNet],
    schedule: &Schedule,
    pool: Option<usize>,
    rng: &mut R,
    log: &mut TrainingLog,
) -> Result<()> {
    if !generator.is_trained() {
        return Err(Error::Ordering("fine-tuning needs a trained generator".into()));
    }
    match pool {
        Some(size) => {
            let images = synthesize_images(generator, &generator.sample_noise(size.max(1), rng))?;
            train_branches(net, &ImageSource::Pool(&images), teachers, schedule, "finetune", rng, log)
        }
        None => train_branches(net, &ImageSource::Generator(generator), teachers, schedule, "finetune", rng, log),
    }
}

/// Maps each branch's task-filtered outputs back to positions in the
/// customised label list.
pub fn branch_columns(net: &RegroupedNet, teacher_labels: &[Vec<usize>], customized: &[usize]) -> Result<Vec<Vec<usize>>> {
    net.branches
        .iter()
        .map(|br| {
            let labels = teacher_labels
                .get(br.teacher - 1)
                .ok_or_else(|| Error::invalid("branch_columns", format!("no label set for teacher {}", br.teacher)))?;
            br.task
                .indices()
                .iter()
                .map(|&local| {
                    let global = labels[local];
                    customized
                        .iter()
                        .position(|&c| c == global)
                        .ok_or_else(|| Error::invalid("branch_columns", format!("label {global} is not customised")))
                })
                .collect()
        })
        .collect()
}

/// Runs `f` over `[chunk]`-sized slices of `images` and stacks the results.
/// Chunks are independent, so `threads > 1` gives the same bytes.
pub fn batched<F>(images: &Tensor, chunk: usize, threads: usize, f: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let n = images.batch();
    let chunk = chunk.max(1);
    let ranges: Vec<(usize, usize)> = (0..n).step_by(chunk).map(|s| (s, (s + chunk).min(n))).collect();
    let run = |&(s, e): &(usize, usize)| f(&images.slice_batch(s, e)?);
    let parts: Vec<Tensor> = if threads <= 1 || ranges.len() <= 1 {
        ranges.iter().map(run).collect::<Result<_>>()?
    } else {
        let per = ranges.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = ranges
                .chunks(per)
                .map(|group| scope.spawn(move || group.iter().map(run).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::new();
            for h in handles {
                out.extend(h.join().expect("evaluation thread panicked")?);
            }
            Ok::<_, Error>(out)
        })?
    };
    Tensor::stack_batch(&parts)
}

/// `[N, |Y_cst|]` scores of the regrouped network.
pub fn predict_customized(
    net: &RegroupedNet,
    images: &Tensor,
    columns: &[Vec<usize>],
    width: usize,
    threads: usize,
) -> Result<Tensor> {
    batched(images, 64, threads, |x| {
        let n = x.batch();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let outs = net.forward(&mut tape, xv, false)?;
        let mut scores = vec![0.0f32; n * width];
        for (out, cols) in outs.iter().zip(columns) {
            let v = tape.value(*out).data();
            let k = cols.len();
            for i in 0..n {
                for (j, &col) in cols.iter().enumerate() {
                    scores[i * width + col] = v[i * k + j];
                }
            }
        }
        Tensor::new(&[n, width], scores)
    })
}

/// Teacher scores over a whole image set.
pub fn predict_teacher(teacher: &TeacherNet, images: &Tensor, threads: usize) -> Result<Tensor> {
    batched(images, 64, threads, |x| teacher_predictions(teacher, x))
}

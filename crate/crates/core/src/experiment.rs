//! End-to-end runs on the synthetic task: teacher pre-training, the full
//! amalgamation pipeline, baselines and ablations.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::Config;
use crate::data::{coco_style_metrics, component_rng, DatasetParams, MetricsReport, Split, Style, SyntheticDataset, TaskSplit};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nn::{ArchSpec, Branch, FilterBank, GeneratorStack, RegroupedNet, TargetNet, TaskFilter, TeacherFilter, TeacherNet};
use crate::pipeline::{
    branch_columns, branch_out, fine_tune, generator_filters, predict_customized, predict_teacher, regroup,
    synthesize_images, train_branches, train_dual, train_generator, BranchPlan, ConvergenceRecord, GeneratorOptions,
    ImageSource, Optimizer, Schedule, TrainingLog,
};

/// Trains a teacher on the labels `label_set` and scores it on `eval`.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_teacher<R: Rng + ?Sized>(
    train: &SyntheticDataset,
    eval: &SyntheticDataset,
    label_set: &[usize],
    arch: &ArchSpec,
    schedule: &Schedule,
    top_k: usize,
    threads: usize,
    rng: &mut R,
) -> Result<(TeacherNet, MetricsReport)> {
    if label_set.is_empty() {
        return Err(Error::invalid("pretrain_teacher", "empty label set"));
    }
    schedule.validate()?;
    let names = label_set.iter().map(|&c| train.label_names[c].clone()).collect();
    let mut teacher = TeacherNet::new(arch, names, rng)?;
    let targets = train.label_columns(label_set)?;
    let mut opt = Optimizer::new(schedule.optim.clone());
    let mut order: Vec<usize> = Vec::new();
    for it in 0..schedule.iterations {
        if order.len() < schedule.batch_size {
            order = (0..train.len()).collect();
            order.shuffle(rng);
        }
        let idx = order.split_off(order.len() - schedule.batch_size.min(order.len()));
        let x = train.images.gather_batch(&idx)?;
        let y = targets.gather_batch(&idx)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (_, p) = teacher.forward(&mut tape, xv, true)?;
        let loss = tape.bce_mean(p, &y)?;
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Diverged {
                stage: "pretrain".into(),
                iteration: it,
                value,
            });
        }
        tape.backward(loss)?;
        opt.begin_step();
        opt.update(&mut teacher, &tape, schedule.optim.lr_at(it, schedule.iterations));
    }
    let report = evaluate_teacher(&teacher, eval, label_set, top_k, threads)?;
    Ok((teacher, report))
}

pub fn evaluate_teacher(
    teacher: &TeacherNet,
    eval: &SyntheticDataset,
    label_set: &[usize],
    top_k: usize,
    threads: usize,
) -> Result<MetricsReport> {
    let scores = predict_teacher(teacher, &eval.images, threads)?;
    let labels = eval.label_columns(label_set)?;
    coco_style_metrics(&scores, &labels, top_k.min(label_set.len()), &teacher.label_names)
}

/// Task-level filters `g_m` from a split: teacher-local indices of the
/// customised labels each teacher serves.
pub fn task_filters(split: &TaskSplit) -> Result<Vec<TaskFilter>> {
    split
        .assignments()
        .iter()
        .zip(&split.teacher_labels)
        .map(|(pairs, set)| TaskFilter::new(pairs.iter().map(|&(local, _)| local).collect(), set.len()))
        .collect()
}

/// Student whose blocks all feed one filter and teacher head per branch
/// (`S[m] = B` for every teacher), trained end to end by the baselines.
pub fn collapsed_student<R: Rng + ?Sized>(
    arch: &ArchSpec,
    teachers: &[TeacherNet],
    tasks: &[TaskFilter],
    reduction: usize,
    rng: &mut R,
) -> Result<RegroupedNet> {
    let b = arch.blocks();
    let target = TargetNet::new(arch, teachers.len(), reduction, rng)?;
    let last = *arch.widths.last().expect("validated");
    let branches = teachers
        .iter()
        .zip(tasks)
        .enumerate()
        .map(|(i, (t, task))| Branch {
            teacher: i + 1,
            split: b,
            student_blocks: Vec::new(),
            filter: TeacherFilter::new(last, reduction, rng),
            teacher_blocks: Vec::new(),
            head: t.head.clone(),
            task: task.clone(),
        })
        .collect();
    Ok(RegroupedNet {
        trunk: target.blocks,
        branches,
        plan: BranchPlan::new(vec![b; teachers.len()], b)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    RandomNoise,
    SimilarData,
    DaflStyle,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::RandomNoise, BaselineKind::SimilarData, BaselineKind::DaflStyle];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::RandomNoise => "random_noise",
            BaselineKind::SimilarData => "similar_data",
            BaselineKind::DaflStyle => "dafl_style",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}; expected random_noise, similar_data or dafl_style")))
    }
}

/// Everything produced by one full pipeline run.
pub struct FullRun {
    pub generator: GeneratorStack,
    pub generator_filters: FilterBank,
    pub target: TargetNet,
    pub record: ConvergenceRecord,
    pub plan: BranchPlan,
    pub net: RegroupedNet,
    pub before_finetune: MetricsReport,
    pub metrics: MetricsReport,
    pub log: TrainingLog,
}

pub struct BaselineRun {
    pub kind: BaselineKind,
    pub net: RegroupedNet,
    pub metrics: MetricsReport,
    pub log: TrainingLog,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub lambda_in1: f64,
    pub lambda_in2: f64,
    pub plan: BranchPlan,
    pub metrics: MetricsReport,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("config,lambda_in1,lambda_in2,splits,{}\n", MetricsReport::SUMMARY_HEADER);
    for r in rows {
        let splits = r.plan.splits().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        let name = match (r.lambda_in1 != 0.0, r.lambda_in2 != 0.0) {
            (true, false) => "image_stream",
            (false, true) => "feature_stream",
            _ => "both_streams",
        };
        let _ = writeln!(
            s,
            "{name},{},{},{splits},{}",
            r.lambda_in1,
            r.lambda_in2,
            r.metrics.summary_row()
        );
    }
    s
}

/// Mean per-label binary entropy of teacher outputs on synthesized images,
/// for generators trained with and without the discrete loss.
#[derive(Clone, Debug)]
pub struct EntropyReport {
    pub labels: Vec<String>,
    pub with_discrete: Vec<f64>,
    pub without_discrete: Vec<f64>,
}

impl EntropyReport {
    pub fn mean(values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / values.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,entropy_with_discrete,entropy_without_discrete\n");
        for ((l, a), b) in self.labels.iter().zip(&self.with_discrete).zip(&self.without_discrete) {
            let _ = writeln!(s, "{l},{a:.6},{b:.6}");
        }
        let _ = writeln!(
            s,
            "mean,{:.6},{:.6}",
            Self::mean(&self.with_discrete),
            Self::mean(&self.without_discrete)
        );
        s
    }
}

fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

/// Datasets, task split and pre-trained teachers shared by every run.
pub struct Workbench {
    pub cfg: Config,
    pub split: TaskSplit,
    pub tasks: Vec<TaskFilter>,
    pub train: SyntheticDataset,
    pub eval: SyntheticDataset,
    pub teachers: Vec<TeacherNet>,
    pub teacher_reports: Vec<MetricsReport>,
    pub threads: usize,
}

impl Workbench {
    /// Generates the datasets; teachers still have to be attached.
    pub fn datasets(cfg: &Config, bit_exact: bool) -> Result<Self> {
        cfg.validate()?;
        let split = cfg.task_split()?;
        let tasks = task_filters(&split)?;
        let params = |split, samples| DatasetParams {
            seed: crate::data::derive_seed(cfg.seed, "dataset"),
            samples,
            labels: cfg.dataset.labels,
            split,
            style: Style::Standard,
        };
        Ok(Workbench {
            train: SyntheticDataset::generate(&params(Split::Train, cfg.dataset.train_samples))?,
            eval: SyntheticDataset::generate(&params(Split::Eval, cfg.dataset.eval_samples))?,
            cfg: cfg.clone(),
            split,
            tasks,
            teachers: Vec::new(),
            teacher_reports: Vec::new(),
            threads: if bit_exact { 1 } else { cfg.eval.threads.max(1) },
        })
    }

    /// Datasets plus freshly pre-trained teachers.
    pub fn prepare(cfg: &Config, bit_exact: bool) -> Result<Self> {
        let mut wb = Self::datasets(cfg, bit_exact)?;
        for (m, set) in cfg.teachers.label_sets.iter().enumerate() {
            let mut rng = component_rng(cfg.seed, &format!("teacher{}", m + 1));
            let (t, report) = pretrain_teacher(
                &wb.train,
                &wb.eval,
                set,
                &cfg.arch,
                &cfg.teacher_schedule(),
                cfg.eval.top_k,
                wb.threads,
                &mut rng,
            )?;
            log::info!("teacher {} mAP {:.4}", m + 1, report.map);
            wb.teachers.push(t);
            wb.teacher_reports.push(report);
        }
        Ok(wb)
    }

    /// Attaches teachers loaded elsewhere and scores them.
    pub fn with_teachers(mut self, teachers: Vec<TeacherNet>) -> Result<Self> {
        if teachers.len() != self.split.teachers() {
            return Err(Error::Config(format!(
                "{} teachers supplied, configuration has {}",
                teachers.len(),
                self.split.teachers()
            )));
        }
        self.teacher_reports = teachers
            .iter()
            .zip(&self.split.teacher_labels)
            .map(|(t, set)| evaluate_teacher(t, &self.eval, set, self.cfg.eval.top_k, self.threads))
            .collect::<Result<_>>()?;
        self.teachers = teachers;
        Ok(self)
    }

    fn rng(&self, tag: &str) -> ChaCha8Rng {
        component_rng(self.cfg.seed, tag)
    }

    fn require_teachers(&self) -> Result<()> {
        if self.teachers.is_empty() {
            return Err(Error::Ordering("teachers must be pre-trained first".into()));
        }
        Ok(())
    }

    /// Scores a regrouped network on `Y_cst` over the evaluation split.
    pub fn evaluate(&self, net: &RegroupedNet) -> Result<MetricsReport> {
        let customized = &self.split.customized;
        let columns = branch_columns(net, &self.split.teacher_labels, customized)?;
        let scores = predict_customized(net, &self.eval.images, &columns, customized.len(), self.threads)?;
        let labels = self.eval.label_columns(customized)?;
        let names: Vec<String> = customized.iter().map(|&c| self.eval.label_names[c].clone()).collect();
        coco_style_metrics(&scores, &labels, self.cfg.eval.top_k.min(customized.len()), &names)
    }

    /// Step I with the given loss weights.
    pub fn train_gan(
        &self,
        loss: &LossConfig,
        iterations: usize,
        options: GeneratorOptions,
        tag: &str,
    ) -> Result<(GeneratorStack, FilterBank, TrainingLog)> {
        self.require_teachers()?;
        let g = &self.cfg.generator;
        let mut rng = self.rng(tag);
        let mut generator = GeneratorStack::new(&self.cfg.arch, g.noise_dim, g.seed_channels, &mut rng)?;
        let mut filters = generator_filters(&self.cfg.arch, self.teachers.len(), g.filter_reduction, &mut rng);
        let schedule = Schedule {
            iterations,
            ..self.cfg.generator_schedule()
        };
        let mut log = TrainingLog::default();
        train_generator(&mut generator, &mut filters, &self.teachers, loss, &schedule, options, &mut rng, &mut log)?;
        Ok((generator, filters, log))
    }

    /// Step II over all blocks for a fresh dual generator.
    pub fn train_target(
        &self,
        generator: &GeneratorStack,
        loss: &LossConfig,
        iterations: usize,
    ) -> Result<(TargetNet, ConvergenceRecord, TrainingLog)> {
        self.require_teachers()?;
        let mut rng = self.rng("dual");
        let mut target = TargetNet::new(&self.cfg.arch, self.teachers.len(), self.cfg.generator.filter_reduction, &mut rng)?;
        let schedule = Schedule {
            iterations,
            ..self.cfg.dual.schedule()
        };
        let mut log = TrainingLog::default();
        let record = train_dual(
            &mut target,
            generator,
            &self.teachers,
            &self.tasks,
            loss,
            &schedule,
            self.cfg.branch.window,
            &mut rng,
            &mut log,
        )?;
        Ok((target, record, log))
    }

    /// Step III: branch-out, regroup and fine-tune.
    pub fn assemble(
        &self,
        target: &TargetNet,
        record: &ConvergenceRecord,
        generator: &GeneratorStack,
        iterations: usize,
    ) -> Result<(BranchPlan, RegroupedNet, MetricsReport, TrainingLog)> {
        let plan = branch_out(record)?;
        let mut net = regroup(target, &self.teachers, &self.tasks, &plan)?;
        let before = self.evaluate(&net)?;
        let schedule = Schedule {
            iterations,
            ..self.cfg.finetune_schedule()
        };
        let mut log = TrainingLog::default();
        let pool = self.cfg.finetune.fixed_pool.then_some(self.cfg.finetune.pool_size);
        fine_tune(&mut net, generator, &self.teachers, &schedule, pool, &mut self.rng("finetune"), &mut log)?;
        Ok((plan, net, before, log))
    }

    /// Steps I to III with the configured schedules.
    pub fn run_full(&self) -> Result<FullRun> {
        let cfg = &self.cfg;
        let (generator, generator_filters, mut log) =
            self.train_gan(&cfg.loss, cfg.generator.iterations, GeneratorOptions::default(), "generator")?;
        let (mut target, record, dual_log) = self.train_target(&generator, &cfg.loss, cfg.dual.iterations)?;
        log.extend(dual_log);
        let (plan, net, before_finetune, ft_log) = self.assemble(&target, &record, &generator, cfg.finetune.iterations)?;
        log.extend(ft_log);
        target.branch_plan = Some(plan.clone());
        let metrics = self.evaluate(&net)?;
        Ok(FullRun {
            generator,
            generator_filters,
            target,
            record,
            plan,
            net,
            before_finetune,
            metrics,
            log,
        })
    }

    /// Trains a collapsed student on the baseline's image source.
    pub fn run_baseline(&self, kind: BaselineKind) -> Result<BaselineRun> {
        self.require_teachers()?;
        let cfg = &self.cfg;
        let mut rng = self.rng(&format!("baseline.{}", kind.name()));
        let mut net = collapsed_student(&cfg.arch, &self.teachers, &self.tasks, cfg.generator.filter_reduction, &mut rng)?;
        let mut log = TrainingLog::default();
        let schedule = cfg.baseline.schedule();
        match kind {
            BaselineKind::RandomNoise => {
                let source = ImageSource::UniformNoise {
                    shape: cfg.arch.image_shape(),
                };
                train_branches(&mut net, &source, &self.teachers, &schedule, "baseline", &mut rng, &mut log)?;
            }
            BaselineKind::SimilarData => {
                let similar = SyntheticDataset::generate(&DatasetParams {
                    seed: crate::data::derive_seed(cfg.seed, "dataset.similar"),
                    samples: cfg.dataset.similar_samples,
                    labels: cfg.dataset.labels,
                    split: Split::Train,
                    style: Style::Similar,
                })?;
                let source = ImageSource::Dataset(&similar);
                train_branches(&mut net, &source, &self.teachers, &schedule, "baseline", &mut rng, &mut log)?;
            }
            BaselineKind::DaflStyle => {
                let loss = LossConfig {
                    gamma: 0.0,
                    ..cfg.loss.clone()
                };
                let options = GeneratorOptions { image_level_only: true };
                let (generator, _, gen_log) = self.train_gan(&loss, cfg.generator.iterations, options, "baseline.dafl.generator")?;
                log.extend(gen_log);
                let source = ImageSource::Generator(&generator);
                train_branches(&mut net, &source, &self.teachers, &schedule, "baseline", &mut rng, &mut log)?;
            }
        }
        let metrics = self.evaluate(&net)?;
        Ok(BaselineRun { kind, net, metrics, log })
    }

    /// Table-style grid over the two Step II input streams, reusing one generator.
    pub fn run_stream_ablation(&self, generator: &GeneratorStack) -> Result<Vec<AblationRow>> {
        let cfg = &self.cfg;
        [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
            .into_iter()
            .map(|(l1, l2)| {
                let loss = LossConfig {
                    lambda_in1: l1,
                    lambda_in2: l2,
                    ..cfg.loss.clone()
                };
                let (target, record, _) = self.train_target(generator, &loss, cfg.ablation.dual_iterations)?;
                let (plan, net, _, _) = self.assemble(&target, &record, generator, cfg.ablation.finetune_iterations)?;
                Ok(AblationRow {
                    lambda_in1: l1,
                    lambda_in2: l2,
                    plan,
                    metrics: self.evaluate(&net)?,
                })
            })
            .collect()
    }

    /// Per-label output entropy of the teachers on images from generators
    /// trained with the configured discrete-loss weight and with it removed.
    pub fn run_entropy_ablation(&self) -> Result<EntropyReport> {
        let cfg = &self.cfg;
        let measure = |gamma: f64| -> Result<Vec<f64>> {
            let loss = LossConfig { gamma, ..cfg.loss.clone() };
            let (generator, _, _) = self.train_gan(
                &loss,
                cfg.ablation.generator_iterations,
                GeneratorOptions::default(),
                "ablation.generator",
            )?;
            let mut rng = self.rng("ablation.entropy");
            let images = synthesize_images(&generator, &generator.sample_noise(cfg.ablation.entropy_samples.max(1), &mut rng))?;
            let mut out = Vec::new();
            for t in &self.teachers {
                let p = predict_teacher(t, &images, self.threads)?;
                let (n, c) = p.dims2("entropy")?;
                for j in 0..c {
                    let h: f64 = (0..n).map(|i| binary_entropy(p.data()[i * c + j] as f64)).sum();
                    out.push(h / n as f64);
                }
            }
            Ok(out)
        };
        let labels = self
            .teachers
            .iter()
            .enumerate()
            .flat_map(|(m, t)| t.label_names.iter().map(move |l| format!("t{}:{l}", m + 1)))
            .collect();
        Ok(EntropyReport {
            labels,
            with_discrete: measure(cfg.loss.gamma)?,
            without_discrete: measure(0.0)?,
        })
    }
}

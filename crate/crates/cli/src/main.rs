use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use amalgam::config::Config;
use amalgam::data::{component_rng, load_checkpoint, save_checkpoint, MetricsReport, SyntheticDataset};
use amalgam::experiment::{ablation_csv, BaselineKind, Workbench};
use amalgam::nn::{GeneratorStack, Module, RegroupedNet, TargetNet, TeacherNet};
use amalgam::pipeline::{
    branch_out, fine_tune, regroup, BranchPlan, ConvergenceRecord, GeneratorOptions, TrainingLog,
};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "amalgam", version, about = "Data-free multi-teacher knowledge amalgamation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Single-threaded evaluation for byte-identical reruns.
    #[arg(long, global = true)]
    bit_exact: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write label tables.
    GenData,
    /// Pre-train the teachers.
    Pretrain,
    /// Step I: train the group-stack generator.
    TrainGenerator,
    /// Step II: train the dual generator block by block.
    TrainDual,
    /// Pick branch-out points from the convergence record.
    BranchOut,
    /// Step III: regroup and fine-tune the target network.
    Finetune,
    /// Score the target network on the customised labels.
    Evaluate,
    /// Train and score a comparison baseline.
    Baseline {
        #[arg(long, value_parser = ["random_noise", "similar_data", "dafl_style"])]
        kind: String,
    },
    /// Every step from pre-training to evaluation.
    FullPipeline,
    /// Stream-weight grid and discrete-loss entropy comparison.
    Ablate,
}

struct Run {
    cfg: Config,
    out: PathBuf,
    bit_exact: bool,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        fs::write(common.out.join("config.toml"), cfg.to_toml())?;
        Ok(Run {
            cfg,
            out: common.out.clone(),
            bit_exact: common.bit_exact,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn read(&self, name: &str, produced_by: &str) -> Result<String> {
        let path = self.path(name);
        fs::read_to_string(&path).with_context(|| format!("reading {} (run `{produced_by}` first)", path.display()))
    }

    fn load<M: Module<f32>>(&self, net: &mut M, name: &str, produced_by: &str) -> Result<()> {
        let dir = self.path(name);
        if !dir.join("manifest.txt").exists() {
            bail!("no checkpoint at {} (run `{produced_by}` first)", dir.display());
        }
        load_checkpoint(net, &dir)?;
        Ok(())
    }

    fn save<M: Module<f32>>(&self, net: &M, name: &str) -> Result<()> {
        save_checkpoint(net, &self.path(name))?;
        log::info!("saved checkpoint {}", self.path(name).display());
        Ok(())
    }

    fn bench(&self) -> Result<Workbench> {
        Ok(Workbench::datasets(&self.cfg, self.bit_exact)?)
    }

    fn teachers(&self) -> Result<Workbench> {
        let bench = self.bench()?;
        let mut rng = component_rng(self.cfg.seed, "load");
        let mut teachers = Vec::new();
        for (m, set) in self.cfg.teachers.label_sets.iter().enumerate() {
            let names = set.iter().map(|&c| bench.train.label_names[c].clone()).collect();
            let mut t = TeacherNet::new(&self.cfg.arch, names, &mut rng)?;
            self.load(&mut t, &format!("teacher{}", m + 1), "pretrain")?;
            teachers.push(t);
        }
        Ok(bench.with_teachers(teachers)?)
    }

    fn generator(&self) -> Result<GeneratorStack> {
        let g = &self.cfg.generator;
        let mut gen = GeneratorStack::new(&self.cfg.arch, g.noise_dim, g.seed_channels, &mut component_rng(self.cfg.seed, "load"))?;
        self.load(&mut gen, "generator", "train-generator")?;
        gen.set_trained(true);
        Ok(gen)
    }

    fn dual(&self, teachers: usize) -> Result<TargetNet> {
        let mut rng = component_rng(self.cfg.seed, "load");
        let mut target = TargetNet::new(&self.cfg.arch, teachers, self.cfg.generator.filter_reduction, &mut rng)?;
        self.load(&mut target, "dual", "train-dual")?;
        target.set_trained_blocks(target.block_count())?;
        Ok(target)
    }

    fn plan(&self) -> Result<BranchPlan> {
        Ok(BranchPlan::from_manifest(&self.read("branch_plan.txt", "branch-out")?, self.cfg.arch.blocks())?)
    }

    fn write_metrics(&self, prefix: &str, report: &MetricsReport) -> Result<()> {
        self.write(&format!("{prefix}metrics.csv"), report.to_metrics_csv())?;
        self.write(&format!("{prefix}coco_metrics.csv"), report.to_coco_csv())?;
        println!("{prefix}mAP {:.4}", report.map);
        Ok(())
    }

    fn write_log(&self, name: &str, log: &TrainingLog) -> Result<()> {
        self.write(name, log.to_csv())
    }
}

fn label_table(data: &SyntheticDataset) -> String {
    let mut s = data.label_names.join(",");
    s.push('\n');
    let (n, c) = (data.len(), data.label_count());
    for i in 0..n {
        let row: Vec<&str> = (0..c)
            .map(|j| if data.labels.data()[i * c + j] > 0.5 { "1" } else { "0" })
            .collect();
        s += &row.join(",");
        s.push('\n');
    }
    s
}

fn gen_data(run: &Run) -> Result<()> {
    let bench = run.bench()?;
    run.write("train_labels.csv", label_table(&bench.train))?;
    run.write("eval_labels.csv", label_table(&bench.eval))?;
    let mut summary = String::from("label,name,train_rate,eval_rate\n");
    let (train, eval) = (bench.train.marginals(), bench.eval.marginals());
    for (c, name) in bench.train.label_names.iter().enumerate() {
        writeln!(summary, "{c},{name},{:.4},{:.4}", train[c], eval[c])?;
    }
    run.write("dataset_summary.csv", &summary)?;
    println!("{} train / {} eval images, {} labels", bench.train.len(), bench.eval.len(), bench.train.label_count());
    Ok(())
}

fn pretrain(run: &Run) -> Result<Workbench> {
    let bench = Workbench::prepare(&run.cfg, run.bit_exact)?;
    let mut table = format!("teacher,{}\n", MetricsReport::SUMMARY_HEADER);
    for (m, (t, report)) in bench.teachers.iter().zip(&bench.teacher_reports).enumerate() {
        run.save(t, &format!("teacher{}", m + 1))?;
        writeln!(table, "{},{}", m + 1, report.summary_row())?;
        println!("teacher {} mAP {:.4}", m + 1, report.map);
    }
    run.write("teacher_metrics.csv", table)?;
    Ok(bench)
}

fn train_generator(run: &Run, bench: &Workbench) -> Result<GeneratorStack> {
    let (gen, filters, log) = bench.train_gan(
        &run.cfg.loss,
        run.cfg.generator.iterations,
        GeneratorOptions::default(),
        "generator",
    )?;
    run.save(&gen, "generator")?;
    run.save(&filters, "generator_filters")?;
    run.write_log("generator_log.csv", &log)?;
    Ok(gen)
}

fn train_dual(run: &Run, bench: &Workbench, gen: &GeneratorStack) -> Result<(TargetNet, ConvergenceRecord)> {
    let (target, record, log) = bench.train_target(gen, &run.cfg.loss, run.cfg.dual.iterations)?;
    run.save(&target, "dual")?;
    run.write("convergence.csv", record.to_csv())?;
    run.write_log("dual_log.csv", &log)?;
    Ok((target, record))
}

fn choose_branches(run: &Run, record: &ConvergenceRecord) -> Result<BranchPlan> {
    let plan = branch_out(record)?;
    run.write("branch_plan.txt", plan.to_manifest())?;
    println!("branch-out points {:?}", plan.splits());
    Ok(plan)
}

fn finetune(run: &Run, bench: &Workbench, gen: &GeneratorStack, target: &TargetNet, plan: &BranchPlan) -> Result<RegroupedNet> {
    let mut net = regroup(target, &bench.teachers, &bench.tasks, plan)?;
    run.write_metrics("regrouped_", &bench.evaluate(&net)?)?;
    let mut log = TrainingLog::default();
    let pool = run.cfg.finetune.fixed_pool.then_some(run.cfg.finetune.pool_size);
    let mut rng = component_rng(run.cfg.seed, "finetune");
    fine_tune(&mut net, gen, &bench.teachers, &run.cfg.finetune_schedule(), pool, &mut rng, &mut log)?;
    run.save(&net, "target")?;
    run.write_log("finetune_log.csv", &log)?;
    Ok(net)
}

/// Rebuilds the regrouped network's structure, then loads its weights.
fn load_target(run: &Run, bench: &Workbench) -> Result<RegroupedNet> {
    let plan = run.plan()?;
    let target = run.dual(bench.teachers.len())?;
    let mut net = regroup(&target, &bench.teachers, &bench.tasks, &plan)?;
    run.load(&mut net, "target", "finetune")?;
    Ok(net)
}

fn full_pipeline(run: &Run) -> Result<()> {
    let bench = pretrain(run)?;
    let (gen, filters, mut log) = bench.train_gan(
        &run.cfg.loss,
        run.cfg.generator.iterations,
        GeneratorOptions::default(),
        "generator",
    )?;
    run.save(&gen, "generator")?;
    run.save(&filters, "generator_filters")?;
    let (target, record, dual_log) = bench.train_target(&gen, &run.cfg.loss, run.cfg.dual.iterations)?;
    log.extend(dual_log);
    run.save(&target, "dual")?;
    run.write("convergence.csv", record.to_csv())?;
    let (plan, net, before, ft_log) = bench.assemble(&target, &record, &gen, run.cfg.finetune.iterations)?;
    log.extend(ft_log);
    run.write("branch_plan.txt", plan.to_manifest())?;
    println!("branch-out points {:?}", plan.splits());
    run.save(&net, "target")?;
    run.write_metrics("regrouped_", &before)?;
    run.write_log("training_log.csv", &log)?;
    run.write_metrics("", &bench.evaluate(&net)?)
}

fn ablate(run: &Run) -> Result<()> {
    let bench = run.teachers()?;
    let gen = run.generator()?;
    let rows = bench.run_stream_ablation(&gen)?;
    run.write("ablation_report.csv", ablation_csv(&rows))?;
    for r in &rows {
        println!("lambda_in=({}, {}) splits {:?} mAP {:.4}", r.lambda_in1, r.lambda_in2, r.plan.splits(), r.metrics.map);
    }
    let maps: Vec<f64> = rows.iter().map(|r| r.metrics.map).collect();
    if maps.len() == 3 && (maps[2] < maps[0] || maps[2] < maps[1]) {
        log::warn!("both streams together score below a single stream on this seed");
    }
    let entropy = bench.run_entropy_ablation()?;
    run.write("entropy_report.csv", entropy.to_csv())?;
    println!(
        "mean per-label output entropy: {:.4} with the discrete loss, {:.4} without",
        amalgam::experiment::EntropyReport::mean(&entropy.with_discrete),
        amalgam::experiment::EntropyReport::mean(&entropy.without_discrete)
    );
    Ok(())
}

fn execute(command: &Command, run: &Run) -> Result<()> {
    match command {
        Command::GenData => gen_data(run),
        Command::Pretrain => pretrain(run).map(drop),
        Command::TrainGenerator => train_generator(run, &run.teachers()?).map(drop),
        Command::TrainDual => {
            let bench = run.teachers()?;
            train_dual(run, &bench, &run.generator()?).map(drop)
        }
        Command::BranchOut => {
            let text = run.read("convergence.csv", "train-dual")?;
            let record = ConvergenceRecord::from_csv(&text, run.cfg.arch.blocks(), run.cfg.teachers.label_sets.len())?;
            choose_branches(run, &record).map(drop)
        }
        Command::Finetune => {
            let bench = run.teachers()?;
            let target = run.dual(bench.teachers.len())?;
            let net = finetune(run, &bench, &run.generator()?, &target, &run.plan()?)?;
            run.write_metrics("", &bench.evaluate(&net)?)
        }
        Command::Evaluate => {
            let bench = run.teachers()?;
            let net = load_target(run, &bench)?;
            run.write_metrics("", &bench.evaluate(&net)?)
        }
        Command::Baseline { kind } => {
            let kind = BaselineKind::parse(kind)?;
            let bench = run.teachers()?;
            let result = bench.run_baseline(kind)?;
            run.save(&result.net, &format!("baseline_{}", kind.name()))?;
            run.write_log(&format!("baseline_{}_log.csv", kind.name()), &result.log)?;
            run.write_metrics(&format!("baseline_{}_", kind.name()), &result.metrics)
        }
        Command::FullPipeline => full_pipeline(run),
        Command::Ablate => ablate(run),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let run = Run::new(&cli.common)?;
    execute(&cli.command, &run)
}

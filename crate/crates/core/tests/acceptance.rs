//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 8 to 10 share one prepared workbench with the default
//! configuration; expect the whole run to take several minutes.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use amalgam::config::Config;
use amalgam::data::{load_checkpoint, save_checkpoint};
use amalgam::experiment::{ablation_csv, BaselineKind, FullRun, Workbench};
use amalgam::nn::Module;
use common::criteria::{self, Outcome};
use common::oracles::{worst_error, CASES, TOLERANCE};

const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const ASSEMBLY_BUDGET: Duration = Duration::from_secs(1);
const END_TO_END_BUDGET: Duration = Duration::from_secs(30 * 60);
const TEACHER_MAP: f64 = 0.85;
const NOISE_MARGIN: f64 = 0.15;

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    for &(name, case) in CASES {
        let err = worst_error(name, case).map_err(|e| format!("{name}: {e}"))?;
        if err >= TOLERANCE {
            return Err(format!("{name}: relative error {err:.3e}"));
        }
        if err > worst.1 {
            worst = (name, err);
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= GRADIENT_BUDGET {
        return Err(format!("took {elapsed:.1?}"));
    }
    Ok(format!("{} cases, worst {} at {:.2e}, {elapsed:.2?}", CASES.len(), worst.0, worst.1))
}

fn assembly() -> Outcome {
    let start = Instant::now();
    let summary = criteria::discriminator_assembly()?;
    let elapsed = start.elapsed();
    if elapsed >= ASSEMBLY_BUDGET {
        return Err(format!("took {elapsed:.2?}"));
    }
    Ok(format!("{summary}, {elapsed:.2?}"))
}

struct Shared {
    bench: Workbench,
    full: FullRun,
    elapsed: Duration,
}

/// Runs the shared pipeline; the outer error means it could not finish.
fn end_to_end(out: &Path) -> Result<(Shared, Outcome), String> {
    let start = Instant::now();
    let cfg = Config::default();
    let bench = Workbench::prepare(&cfg, true).map_err(|e| e.to_string())?;
    let teacher_maps: Vec<f64> = bench.teacher_reports.iter().map(|r| r.map).collect();
    let full = bench.run_full().map_err(|e| e.to_string())?;
    let noise = bench.run_baseline(BaselineKind::RandomNoise).map_err(|e| e.to_string())?;
    let dafl = bench.run_baseline(BaselineKind::DaflStyle).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let mut table = format!("method,{}\n", amalgam::data::MetricsReport::SUMMARY_HEADER);
    table += &format!("full,{}\n", full.metrics.summary_row());
    table += &format!("random_noise,{}\n", noise.metrics.summary_row());
    table += &format!("dafl_style,{}\n", dafl.metrics.summary_row());
    fs::write(out.join("comparison.csv"), &table).map_err(|e| e.to_string())?;
    fs::write(out.join("training_log.csv"), full.log.to_csv()).map_err(|e| e.to_string())?;
    fs::write(out.join("convergence.csv"), full.record.to_csv()).map_err(|e| e.to_string())?;

    let summary = format!(
        "teachers {:?}, full {:.4} (before fine-tune {:.4}, plan {:?}), random_noise {:.4}, dafl_style {:.4}, {:.0?}",
        teacher_maps.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>(),
        full.metrics.map,
        full.before_finetune.map,
        full.plan.splits(),
        noise.metrics.map,
        dafl.metrics.map,
        elapsed
    );
    let mut problems = Vec::new();
    if let Some(m) = teacher_maps.iter().position(|&v| v <= TEACHER_MAP) {
        problems.push(format!("teacher {} mAP {:.4} <= {TEACHER_MAP}", m + 1, teacher_maps[m]));
    }
    if full.metrics.map - noise.metrics.map < NOISE_MARGIN {
        problems.push(format!("margin over random_noise {:.4} < {NOISE_MARGIN}", full.metrics.map - noise.metrics.map));
    }
    if full.metrics.map <= dafl.metrics.map {
        problems.push("full pipeline does not beat dafl_style".into());
    }
    if elapsed >= END_TO_END_BUDGET {
        problems.push(format!("runtime {elapsed:.0?} over budget"));
    }
    let outcome = if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", problems.join("; ")))
    };
    Ok((Shared { bench, full, elapsed }, outcome))
}

fn ablations(shared: &Shared, out: &Path) -> Outcome {
    let start = Instant::now();
    let rows = shared.bench.run_stream_ablation(&shared.full.generator).map_err(|e| e.to_string())?;
    let csv = ablation_csv(&rows);
    fs::write(out.join("ablation_report.csv"), &csv).map_err(|e| e.to_string())?;
    let entropy = shared.bench.run_entropy_ablation().map_err(|e| e.to_string())?;
    fs::write(out.join("entropy_report.csv"), entropy.to_csv()).map_err(|e| e.to_string())?;
    if rows.len() != 3 || csv.lines().count() != 4 {
        return Err(format!("stream grid incomplete:\n{csv}"));
    }
    if entropy.with_discrete.len() != entropy.labels.len() || entropy.without_discrete.len() != entropy.labels.len() {
        return Err("entropy report is missing labels".into());
    }
    let maps: Vec<f64> = rows.iter().map(|r| r.metrics.map).collect();
    if maps[2] < maps[0] || maps[2] < maps[1] {
        println!(
            "warning: criterion 9 soft check: both streams {:.4} below a single stream ({:.4}, {:.4})",
            maps[2], maps[0], maps[1]
        );
    }
    Ok(format!(
        "grid mAP image {:.4} / feature {:.4} / both {:.4}; mean label entropy {:.4} with discrete loss, {:.4} without; {:.0?}",
        maps[0],
        maps[1],
        maps[2],
        amalgam::experiment::EntropyReport::mean(&entropy.with_discrete),
        amalgam::experiment::EntropyReport::mean(&entropy.without_discrete),
        start.elapsed()
    ))
}

fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.arch.widths = vec![4, 6, 8, 8];
    cfg.dataset.train_samples = 200;
    cfg.dataset.eval_samples = 200;
    cfg.teachers.iterations = 20;
    cfg.generator.iterations = 6;
    cfg.dual.iterations = 4;
    cfg.branch.window = 2;
    cfg.finetune.iterations = 4;
    cfg.eval.threads = 3;
    cfg
}

/// Every artifact a pipeline run writes, keyed by file name.
fn artifacts(bench: &Workbench, run: &FullRun, dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let err = |e: amalgam::Error| e.to_string();
    for (m, t) in bench.teachers.iter().enumerate() {
        save_checkpoint(t, &dir.join(format!("teacher{}", m + 1))).map_err(err)?;
    }
    save_checkpoint(&run.generator, &dir.join("generator")).map_err(err)?;
    save_checkpoint(&run.target, &dir.join("dual")).map_err(err)?;
    save_checkpoint(&run.net, &dir.join("target")).map_err(err)?;
    fs::write(dir.join("metrics.csv"), run.metrics.to_metrics_csv()).map_err(|e| e.to_string())?;
    fs::write(dir.join("coco_metrics.csv"), run.metrics.to_coco_csv()).map_err(|e| e.to_string())?;
    fs::write(dir.join("training_log.csv"), run.log.to_csv()).map_err(|e| e.to_string())?;
    fs::write(dir.join("branch_plan.txt"), run.plan.to_manifest()).map_err(|e| e.to_string())?;
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(key, fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

fn checkpoints_and_determinism(shared: &Shared) -> Outcome {
    let net = &shared.full.net;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_checkpoint(net, dir.path()).map_err(|e| e.to_string())?;
    let mut copy = net.clone();
    copy.visit_params_mut("", &mut |_, p| p.value = p.value.map(|v| v + 1.0));
    load_checkpoint(&mut copy, dir.path()).map_err(|e| e.to_string())?;
    if criteria::param_map(&copy) != criteria::param_map(net) {
        return Err("round trip is not bitwise".into());
    }

    let manifest = dir.path().join("manifest.txt");
    let text = fs::read_to_string(&manifest).map_err(|e| e.to_string())?;
    let corrupted = text.replacen("\t", "\t9", 1);
    fs::write(&manifest, corrupted).map_err(|e| e.to_string())?;
    if load_checkpoint(&mut copy, dir.path()).is_ok() {
        return Err("corrupted manifest accepted".into());
    }

    let cfg = tiny_config();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let bench = Workbench::prepare(&cfg, true).map_err(|e| e.to_string())?;
        let run = bench.run_full().map_err(|e| e.to_string())?;
        let out = tempfile::tempdir().map_err(|e| e.to_string())?;
        runs.push(artifacts(&bench, &run, out.path())?);
    }
    if runs[0].keys().ne(runs[1].keys()) {
        return Err("runs wrote different files".into());
    }
    if let Some((name, _)) = runs[0].iter().find(|(k, v)| runs[1][*k] != **v) {
        return Err(format!("{name} differs between identical runs"));
    }
    let bytes: usize = runs[0].values().map(Vec::len).sum();
    Ok(format!(
        "{} parameters round-trip bitwise; corrupted manifest rejected; {} artifacts ({bytes} bytes) identical across two seeded runs",
        net.param_count(),
        runs[0].len()
    ))
}

fn run(failures: &mut Vec<usize>, id: usize, name: &str, check: impl FnOnce() -> Outcome) {
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match outcome {
        Ok(summary) => println!("criterion {id:>2} PASS  {name}: {summary}"),
        Err(reason) => {
            println!("criterion {id:>2} FAIL  {name}: {reason}");
            failures.push(id);
        }
    }
}

fn main() {
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&out).expect("report directory");
    let mut failures = Vec::new();
    run(&mut failures, 1, "gradient oracles", gradients);
    run(&mut failures, 2, "discriminator assembly", assembly);
    run(&mut failures, 3, "freezing", criteria::freezing);
    run(&mut failures, 4, "loss analytics", criteria::loss_analytics);
    run(&mut failures, 5, "branch-out", criteria::branch_out_oracle);
    run(&mut failures, 6, "regrouping equivalence", criteria::regroup_equivalence);
    run(&mut failures, 7, "metric oracles", criteria::metric_oracles);

    let mut shared = None;
    run(&mut failures, 8, "end-to-end ordering", || {
        let (s, outcome) = end_to_end(&out)?;
        shared = Some(s);
        outcome
    });
    match &shared {
        Some(s) => {
            run(&mut failures, 9, "ablation harnesses", || ablations(s, &out));
            run(&mut failures, 10, "checkpoints and determinism", || checkpoints_and_determinism(s));
            println!("shared pipeline time {:.0?}; reports in {}", s.elapsed, out.display());
        }
        None => {
            for (id, name) in [(9, "ablation harnesses"), (10, "checkpoints and determinism")] {
                println!("criterion {id:>2} FAIL  {name}: end-to-end run did not complete");
                failures.push(id);
            }
        }
    }
    if failures.is_empty() {
        println!("acceptance: all 10 criteria pass");
    } else {
        println!("acceptance: failing criteria {failures:?}");
        std::process::exit(1);
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
[arch]
widths = [4, 6, 8, 8]

[dataset]
train_samples = 200
eval_samples = 200
similar_samples = 200

[teachers]
iterations = 20

[generator]
iterations = 6

[dual]
iterations = 4

[branch]
window = 2

[finetune]
iterations = 4

[baseline]
iterations = 4

[ablation]
dual_iterations = 2
finetune_iterations = 2
generator_iterations = 4
entropy_samples = 16
"#;

fn amalgam(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_amalgam"))
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .arg("--out")
        .arg(dir.join("run"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = amalgam(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(key, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn step_commands_chain() {
    let dir = setup();
    let run = dir.path().join("run");
    ok(dir.path(), &["gen-data"]);
    assert!(run.join("dataset_summary.csv").exists());
    ok(dir.path(), &["pretrain"]);
    ok(dir.path(), &["train-generator"]);
    ok(dir.path(), &["train-dual"]);
    let stdout = ok(dir.path(), &["branch-out"]);
    assert!(stdout.contains("branch-out points"));
    let plan = fs::read_to_string(run.join("branch_plan.txt")).unwrap();
    assert!(plan.starts_with("S[1]="));
    ok(dir.path(), &["finetune"]);
    let first = fs::read(run.join("metrics.csv")).unwrap();
    assert!(ok(dir.path(), &["evaluate"]).contains("mAP"));
    assert_eq!(fs::read(run.join("metrics.csv")).unwrap(), first);
    ok(dir.path(), &["baseline", "--kind", "random_noise"]);
    assert!(run.join("baseline_random_noise_metrics.csv").exists());
    ok(dir.path(), &["ablate"]);
    assert_eq!(fs::read_to_string(run.join("ablation_report.csv")).unwrap().lines().count(), 4);
    assert!(run.join("entropy_report.csv").exists());
}

#[test]
fn missing_prerequisite_names_the_step() {
    let dir = setup();
    let out = amalgam(dir.path(), &["train-dual"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain"));
}

#[test]
fn bad_config_is_rejected() {
    let dir = setup();
    fs::write(dir.path().join("tiny.toml"), "[arch]\nwidths = [4, 0]\n").unwrap();
    assert!(!amalgam(dir.path(), &["gen-data"]).status.success());
    fs::write(dir.path().join("tiny.toml"), "[nonsense]\nx = 1\n").unwrap();
    assert!(!amalgam(dir.path(), &["gen-data"]).status.success());
}

#[test]
fn bit_exact_reruns_are_identical() {
    let a = setup();
    let b = setup();
    ok(a.path(), &["--bit-exact", "full-pipeline"]);
    ok(b.path(), &["--bit-exact", "full-pipeline"]);
    let (ta, tb) = (tree(&a.path().join("run")), tree(&b.path().join("run")));
    assert!(ta.contains_key("target/manifest.txt"));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(tb[k] == *v, "{k} differs");
    }
}

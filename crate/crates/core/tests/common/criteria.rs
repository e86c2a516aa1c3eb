//! Property checks shared by the focused test targets and the acceptance
//! runner. Each returns a short summary on success and the first
//! counterexample on failure.

use std::collections::{BTreeMap, BTreeSet};

use amalgam::data::{average_precision, coco_style_metrics};
use amalgam::losses::{discrete_loss, gan_loss, info_entropy_loss, one_hot_loss, LossConfig};
use amalgam::nn::{
    discriminator_blocks, dual_discriminator_blocks, ArchSpec, GeneratorStack, Module, TargetNet, TaskFilter,
    TeacherNet,
};
use amalgam::pipeline::{
    branch_out, fine_tune, generator_filters, regroup, train_dual_block, train_generator, BranchPlan,
    ConvergenceRecord, GeneratorOptions, OptimConfig, Schedule, TrainingLog,
};
use amalgam::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Every contiguous run of blocks that ends at `B` and has `len` blocks,
/// found by scanning all subsets of `{1..B}`.
fn brute_force_suffix(b_total: usize, len: usize) -> Vec<Vec<usize>> {
    (0u32..1 << b_total)
        .map(|mask| (1..=b_total).filter(|k| mask & (1 << (k - 1)) != 0).collect::<Vec<_>>())
        .filter(|s| s.len() == len)
        .filter(|s| s.windows(2).all(|w| w[1] == w[0] + 1))
        .filter(|s| s.last().is_none_or(|&k| k == b_total))
        .collect()
}

pub fn discriminator_assembly() -> Outcome {
    let mut checked = 0;
    for b_total in 1..=6 {
        for j in 1..=b_total {
            let expected = brute_force_suffix(b_total, j);
            let got = discriminator_blocks(b_total, j).map_err(|e| e.to_string())?;
            ensure(expected == vec![got.clone()], || format!("D^{j} for B={b_total}: {got:?} vs {expected:?}"))?;
            checked += 1;
        }
        for b in 1..=b_total {
            let expected = brute_force_suffix(b_total, b_total - b);
            let got = dual_discriminator_blocks(b_total, b).map_err(|e| e.to_string())?;
            ensure(expected == vec![got.clone()], || format!("D_dual^{b} for B={b_total}: {got:?} vs {expected:?}"))?;
            checked += 1;
        }
        for j in 1..b_total {
            let d = discriminator_blocks(b_total, j).map_err(|e| e.to_string())?;
            let dual = dual_discriminator_blocks(b_total, b_total - j).map_err(|e| e.to_string())?;
            ensure(d == dual, || format!("duality fails for B={b_total}, j={j}"))?;
        }
        for bad in [0, b_total + 1] {
            ensure(discriminator_blocks(b_total, bad).is_err(), || format!("D^{bad} accepted for B={b_total}"))?;
            ensure(dual_discriminator_blocks(b_total, bad).is_err(), || format!("D_dual^{bad} accepted"))?;
        }
    }
    Ok(format!("{checked} index sets match brute force, duality holds"))
}

/// Per-parameter hashes keyed by path.
pub fn param_map<M: Module<f32>>(m: &M) -> BTreeMap<String, Vec<u32>> {
    let mut out = BTreeMap::new();
    m.visit_params("", &mut |name, p| {
        out.insert(name.to_string(), p.value.data().iter().map(|v| v.to_bits()).collect());
    });
    out
}

fn changed(before: &BTreeMap<String, Vec<u32>>, after: &BTreeMap<String, Vec<u32>>) -> BTreeSet<String> {
    before.iter().filter(|(k, v)| after[*k] != **v).map(|(k, _)| k.clone()).collect()
}

pub struct Toy {
    pub arch: ArchSpec,
    pub teachers: Vec<TeacherNet>,
    pub tasks: Vec<TaskFilter>,
}

pub fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchSpec {
        image_size: 8,
        widths: vec![4, 6, 8, 8],
        ..ArchSpec::default()
    };
    let names = |n: usize| (0..n).map(|i| format!("l{i}")).collect::<Vec<_>>();
    let teachers = vec![
        TeacherNet::new(&arch, names(3), &mut rng).unwrap(),
        TeacherNet::new(&arch, names(4), &mut rng).unwrap(),
    ];
    let tasks = vec![TaskFilter::new(vec![0, 2], 3).unwrap(), TaskFilter::new(vec![1, 3], 4).unwrap()];
    Toy { arch, teachers, tasks }
}

pub fn short_schedule(iterations: usize) -> Schedule {
    Schedule {
        iterations,
        batch_size: 4,
        optim: OptimConfig::default(),
    }
}

pub fn freezing() -> Outcome {
    let Toy { arch, teachers, tasks } = toy(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let teacher_before: Vec<u64> = teachers.iter().map(|t| t.param_hash()).collect();
    let mut generator = GeneratorStack::new(&arch, 8, 8, &mut rng).unwrap();
    let mut gfilters = generator_filters(&arch, 2, 4, &mut rng);
    let cfg = LossConfig::default();
    let mut log = TrainingLog::default();

    let (g0, f0) = (param_map(&generator), param_map(&gfilters));
    train_generator(
        &mut generator,
        &mut gfilters,
        &teachers,
        &cfg,
        &short_schedule(3),
        GeneratorOptions::default(),
        &mut rng,
        &mut log,
    )
    .map_err(|e| e.to_string())?;
    let teacher_after: Vec<u64> = teachers.iter().map(|t| t.param_hash()).collect();
    ensure(teacher_before == teacher_after, || "a teacher changed in Step I".into())?;
    let gen_changed = changed(&g0, &param_map(&generator));
    let filt_changed = changed(&f0, &param_map(&gfilters));
    ensure(gen_changed.len() == g0.len(), || {
        format!("Step I left generator tensors unchanged: {:?}", g0.keys().filter(|k| !gen_changed.contains(*k)).collect::<Vec<_>>())
    })?;
    ensure(!filt_changed.is_empty(), || "Step I did not update any teacher-level filter".into())?;
    for j in 1..=arch.blocks() {
        ensure(filt_changed.iter().any(|k| k.starts_with(&format!("s{j}."))), || format!("filters of group {j} never updated"))?;
    }

    let mut target = TargetNet::new(&arch, 2, 4, &mut rng).unwrap();
    let gen_hash = generator.param_hash();
    for b in 1..=arch.blocks() {
        let before = param_map(&target);
        train_dual_block(&mut target, b, &generator, &teachers, &tasks, &cfg, &short_schedule(2), 1, &mut rng, &mut log)
            .map_err(|e| e.to_string())?;
        let moved = changed(&before, &param_map(&target));
        let permitted = |k: &String| k.starts_with(&format!("block{b}.")) || k.starts_with(&format!("filter.s{b}."));
        ensure(moved.iter().all(permitted), || {
            format!("block {b}: forbidden updates {:?}", moved.iter().filter(|k| !permitted(k)).collect::<Vec<_>>())
        })?;
        ensure(moved.iter().any(|k| k.starts_with(&format!("block{b}."))), || format!("block {b} never updated"))?;
        ensure(moved.iter().any(|k| k.starts_with(&format!("filter.s{b}."))), || format!("filters f^{b} never updated"))?;
        ensure(generator.param_hash() == gen_hash, || format!("generator changed while training block {b}"))?;
        let th: Vec<u64> = teachers.iter().map(|t| t.param_hash()).collect();
        ensure(th == teacher_before, || format!("a teacher changed while training block {b}"))?;
    }

    let plan = BranchPlan::new(vec![2, 3], arch.blocks()).unwrap();
    let mut net = regroup(&target, &teachers, &tasks, &plan).map_err(|e| e.to_string())?;
    let target_hash = target.param_hash();
    fine_tune(&mut net, &generator, &teachers, &short_schedule(2), None, &mut rng, &mut log).map_err(|e| e.to_string())?;
    let th: Vec<u64> = teachers.iter().map(|t| t.param_hash()).collect();
    ensure(th == teacher_before, || "a teacher changed during fine-tuning".into())?;
    ensure(target.param_hash() == target_hash, || "fine-tuning modified the dual generator it was copied from".into())?;
    Ok(format!(
        "Step I moved {} generator and {} filter tensors; Step II touched only block b and f^b for b=1..{}; teachers untouched",
        gen_changed.len(),
        filt_changed.len(),
        arch.blocks()
    ))
}

pub fn loss_analytics() -> Outcome {
    let mut tape: Tape<f64> = Tape::new();
    let y = tape.constant(Tensor::filled(&[1, 1], 0.5));
    let l = one_hot_loss(&mut tape, y, 0.5).map_err(|e| e.to_string())?;
    let oh = tape.scalar(l);
    ensure((oh - std::f64::consts::LN_2).abs() < 1e-4, || format!("one_hot_loss(0.5) = {oh}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let c = rng.random_range(1..20);
        let mut tape: Tape<f64> = Tape::new();
        let y = tape.constant(Tensor::uniform(&[1, c], 0.0, 1.0, &mut rng));
        let d = discrete_loss(&mut tape, y);
        let v = tape.scalar(d);
        ensure((-1.0..=0.0).contains(&v), || format!("discrete_loss = {v} outside [-1, 0]"))?;
        range = (range.0.min(v), range.1.max(v));
    }

    let c = 6;
    let mut uniform: Tape<f64> = Tape::new();
    let y = uniform.constant(Tensor::filled(&[4, c], 0.3));
    let e = info_entropy_loss(&mut uniform, y).map_err(|e| e.to_string())?;
    let min = uniform.scalar(e);
    ensure((min + (c as f64).ln()).abs() < 1e-6, || format!("info_entropy_loss at uniform = {min}"))?;
    for _ in 0..200 {
        let mut tape: Tape<f64> = Tape::new();
        let y = tape.constant(Tensor::uniform(&[4, c], 0.01, 1.0, &mut rng));
        let e = info_entropy_loss(&mut tape, y).map_err(|e| e.to_string())?;
        ensure(tape.scalar(e) >= min - 1e-12, || "info_entropy_loss below its uniform minimum".into())?;
    }

    // gan_loss is affine in (alpha, beta, gamma): the total at a convex
    // combination of weights equals the same combination of totals.
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let preds = Tensor::<f64>::uniform(&[3, 5], 0.05, 0.95, &mut rng);
        let feats = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let total = |cfg: &LossConfig| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let p = tape.constant(preds.clone());
            let f = tape.constant(feats.clone());
            let g = gan_loss(&mut tape, p, f, cfg).unwrap();
            tape.scalar(g.total)
        };
        let w = |rng: &mut ChaCha8Rng| LossConfig {
            alpha: rng.random_range(0.0..2.0),
            beta: rng.random_range(0.0..5.0),
            gamma: rng.random_range(-2.0..2.0),
            ..LossConfig::default()
        };
        let (a, b) = (w(&mut rng), w(&mut rng));
        let t: f64 = rng.random_range(0.0..1.0);
        let mix = LossConfig {
            alpha: t * a.alpha + (1.0 - t) * b.alpha,
            beta: t * a.beta + (1.0 - t) * b.beta,
            gamma: t * a.gamma + (1.0 - t) * b.gamma,
            ..LossConfig::default()
        };
        worst = worst.max((total(&mix) - (t * total(&a) + (1.0 - t) * total(&b))).abs());
    }
    ensure(worst < 1e-6, || format!("gan_loss affinity residual {worst:e}"))?;
    Ok(format!(
        "one_hot(0.5)={oh:.6}, discrete in [{:.3},{:.3}], entropy min {min:.6}, affinity residual {worst:.1e}",
        range.0, range.1
    ))
}

/// Scan-based argmin with ties to the smallest block.
pub fn brute_force_split(table: &[Vec<f64>], m: usize) -> usize {
    let best = table.iter().map(|row| row[m]).fold(f64::INFINITY, f64::min);
    table.iter().position(|row| row[m] == best).unwrap() + 1
}

pub fn branch_out_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ties = 0;
    for _ in 0..1000 {
        let blocks = rng.random_range(1..=6);
        let teachers = rng.random_range(1..=4);
        let coarse = rng.random_bool(0.5);
        let table: Vec<Vec<f64>> = (0..blocks)
            .map(|_| {
                (0..teachers)
                    .map(|_| if coarse { rng.random_range(0..3) as f64 * 0.25 } else { rng.random_range(0.0..2.0) })
                    .collect()
            })
            .collect();
        let rec = ConvergenceRecord::from_table(&table, 50).map_err(|e| e.to_string())?;
        let plan = branch_out(&rec).map_err(|e| e.to_string())?;
        for m in 0..teachers {
            let column: Vec<f64> = table.iter().map(|r| r[m]).collect();
            let min = column.iter().copied().fold(f64::INFINITY, f64::min);
            if column.iter().filter(|&&v| v == min).count() > 1 {
                ties += 1;
            }
            let expected = brute_force_split(&table, m);
            ensure(plan.split(m + 1) == expected, || format!("S[{}]={} vs brute force {expected} on {table:?}", m + 1, plan.split(m + 1)))?;
        }
        let k = 2f64.powi(rng.random_range(-6..=6));
        let scaled: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
        let rescaled = branch_out(&ConvergenceRecord::from_table(&scaled, 50).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        ensure(rescaled == plan, || format!("scaling by {k} changed the plan for {table:?}"))?;
    }
    let incomplete = ConvergenceRecord::new(3, 2, 50);
    ensure(branch_out(&incomplete).is_err(), || "incomplete record accepted".into())?;
    Ok(format!("1000 random records match the scan oracle ({ties} tied columns), scale-invariant"))
}

pub fn regroup_equivalence() -> Outcome {
    let Toy { arch, teachers, tasks } = toy(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut target = TargetNet::new(&arch, 2, 4, &mut rng).unwrap();
    target.set_trained_blocks(arch.blocks()).unwrap();
    let b_total = arch.blocks();
    let mut compared = 0;
    for plan in [vec![2, 3], vec![1, 4], vec![4, 4], vec![3, 1]] {
        let plan = BranchPlan::new(plan, b_total).unwrap();
        let net = regroup(&target, &teachers, &tasks, &plan).map_err(|e| e.to_string())?;
        ensure(net.trunk.len() == plan.shared_depth(), || "trunk depth differs from min S".into())?;
        for _ in 0..25 {
            let image = Tensor::randn(&[1, 3, arch.image_size, arch.image_size], 1.0, &mut rng);
            for m in 1..=2 {
                let mut tape = Tape::new();
                let x = tape.constant(image.clone());
                let out = net.forward_branch(&mut tape, x, m, false).map_err(|e| e.to_string())?;
                let got = tape.value(out).data().to_vec();

                let s = plan.split(m);
                let mut tape = Tape::new();
                let x = tape.constant(image.clone());
                let h = target.forward_prefix(&mut tape, x, s, None).map_err(|e| e.to_string())?;
                let h = target.filters.get(s, m).unwrap().apply(&mut tape, h, false).map_err(|e| e.to_string())?;
                let h = teachers[m - 1].forward_blocks(&mut tape, h, s + 1, b_total, false).map_err(|e| e.to_string())?;
                let (_, p) = teachers[m - 1].head.forward(&mut tape, h, false).map_err(|e| e.to_string())?;
                let p = tasks[m - 1].apply(&mut tape, p).map_err(|e| e.to_string())?;
                let want = tape.value(p).data().to_vec();
                let same = got.len() == want.len() && got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same, || format!("branch {m} of plan {:?} differs: {got:?} vs {want:?}", plan.splits()))?;
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} images x 2 branches bitwise equal to sequential composition"))
}

pub fn metric_oracles() -> Outcome {
    let ap = |s: &[f64], l: &[u8]| average_precision(s, &l.iter().map(|&v| v == 1).collect::<Vec<_>>()).unwrap();
    let perfect = ap(&[0.9, 0.7, 0.3, 0.1], &[1, 1, 0, 0]);
    ensure(perfect == 1.0, || format!("perfect ranking AP {perfect}"))?;
    let worked = ap(&[0.9, 0.8, 0.1], &[1, 0, 1]);
    ensure(worked == (1.0 + 2.0 / 3.0) / 2.0, || format!("worked example AP {worked}"))?;
    for k in 1..=8usize {
        let mut scores: Vec<f64> = (0..k).map(|i| 1.0 - i as f64 * 0.1).collect();
        scores.push(0.01);
        let mut labels = vec![0u8; k];
        labels.push(1);
        let v = ap(&scores, &labels);
        ensure(v == 1.0 / (k as f64 + 1.0), || format!("reversed ranking with {k} negatives: {v}"))?;
    }

    // Top-1 on ten samples; tally by hand:
    // class 0 predicted on rows 1,4,7,9 (TP 1,7,9), positives 1,3,6,7,9
    // class 1 predicted on rows 2,6,10 (TP 2,6), positives 2,4,6,8
    // class 2 predicted on rows 3,5,8 (TP 5), positives 2,5,7,10
    #[rustfmt::skip]
    let scores = [
        0.9, 0.1, 0.2,  0.2, 0.8, 0.1,  0.3, 0.2, 0.7,  0.6, 0.5, 0.1,  0.1, 0.3, 0.9,
        0.4, 0.7, 0.2,  0.8, 0.3, 0.6,  0.2, 0.1, 0.5,  0.7, 0.6, 0.3,  0.3, 0.9, 0.4,
    ];
    #[rustfmt::skip]
    let labels = [
        1., 0., 0.,  0., 1., 1.,  1., 0., 0.,  0., 1., 0.,  0., 0., 1.,
        1., 1., 0.,  1., 0., 1.,  0., 1., 0.,  1., 0., 0.,  0., 0., 1.,
    ];
    let s = Tensor::<f64>::from_f64(&[10, 3], &scores).unwrap();
    let y = Tensor::<f64>::from_f64(&[10, 3], &labels).unwrap();
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let r = coco_style_metrics(&s, &y, 1, &names).map_err(|e| e.to_string())?;
    let f1 = |p: f64, r: f64| 2.0 * p * r / (p + r);
    let (op, or) = (6.0 / 10.0, 6.0 / 13.0);
    let cp = (3.0 / 4.0 + 2.0 / 3.0 + 1.0 / 3.0) / 3.0;
    let cr = (3.0 / 5.0 + 2.0 / 4.0 + 1.0 / 4.0) / 3.0;
    let expected = [op, or, f1(op, or), cp, cr, f1(cp, cr)];
    let got = [
        r.overall_precision,
        r.overall_recall,
        r.overall_f1,
        r.class_precision,
        r.class_recall,
        r.class_f1,
    ];
    ensure(got == expected, || format!("confusion tally mismatch: {got:?} vs {expected:?}"))?;
    Ok("AP worked examples exact; top-1 confusion tally exact on 10 samples".into())
}

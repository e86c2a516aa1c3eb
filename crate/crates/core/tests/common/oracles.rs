//! Finite-difference gradient cases shared by the oracle tests and the
//! acceptance runner. Every case runs in f64 on small random inputs.

use amalgam::autodiff::gradcheck::{finite_difference_check, finite_difference_check_params};
use amalgam::losses::{
    activation_loss, discrete_loss, dual_block_loss, dual_branch_loss, gan_loss, info_entropy_loss,
    joint_generator_loss, one_hot_loss, GroupOutput, LossConfig,
};
use amalgam::nn::{ArchSpec, Block, Conv, Dense, GeneratorStack, TaskFilter, TeacherFilter, TeacherNet};
use amalgam::{Activation, PoolKind, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;
pub const TRIALS: u64 = 10;

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn probs(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 0.05, 0.95, rng)
}

/// Random weights for a sum-reduction, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(y), rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn sigmoid_of(tape: &mut Tape<f64>, x: Var) -> Var {
    tape.elementwise(Activation::Sigmoid, x)
}

fn conv(rng: &mut ChaCha8Rng, stride: usize) -> Result<f64> {
    let layer: Conv<f64> = Conv::new(3, 4, 3, stride, rng);
    let x = randn(&[2, 3, 6, 6], rng);
    let seed: u64 = rng.random();
    let input = finite_difference_check(
        |t, xv| {
            let y = layer.forward(t, xv, false)?;
            weighted_sum(t, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &x,
        STEP,
    )?;
    let mut layer = layer;
    let params = finite_difference_check_params(
        &mut layer,
        |l, t| {
            let xv = t.constant(x.clone());
            let y = l.forward(t, xv, true)?;
            weighted_sum(t, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        STEP,
        12,
    )?;
    Ok(input.max(params))
}

pub fn conv_stride1(rng: &mut ChaCha8Rng) -> Result<f64> {
    conv(rng, 1)
}

pub fn conv_stride2(rng: &mut ChaCha8Rng) -> Result<f64> {
    conv(rng, 2)
}

pub fn upsampling_conv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut layer: Conv<f64> = Conv::upsampling(3, 2, 3, 2, rng);
    let x = randn(&[2, 3, 3, 3], rng);
    let seed: u64 = rng.random();
    let input = finite_difference_check(
        |t, xv| {
            let y = layer.forward(t, xv, false)?;
            weighted_sum(t, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &x,
        STEP,
    )?;
    let params = finite_difference_check_params(
        &mut layer,
        |l, t| {
            let xv = t.constant(x.clone());
            let y = l.forward(t, xv, true)?;
            weighted_sum(t, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        STEP,
        12,
    )?;
    Ok(input.max(params))
}

pub fn dense(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut layer: Dense<f64> = Dense::new(5, 3, rng);
    let x = randn(&[4, 5], rng);
    let seed: u64 = rng.random();
    let input = finite_difference_check(
        |t, xv| {
            let y = layer.forward(t, xv, false)?;
            weighted_sum(t, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &x,
        STEP,
    )?;
    let params = finite_difference_check_params(
        &mut layer,
        |l, t| {
            let xv = t.constant(x.clone());
            let y = l.forward(t, xv, true)?;
            weighted_sum(t, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        STEP,
        20,
    )?;
    Ok(input.max(params))
}

fn activation(rng: &mut ChaCha8Rng, kind: Activation) -> Result<f64> {
    let x = randn(&[3, 7], rng);
    let seed: u64 = rng.random();
    finite_difference_check(
        |t, xv| {
            let y = t.elementwise(kind, xv);
            weighted_sum(t, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &x,
        STEP,
    )
}

pub fn relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    activation(rng, Activation::Relu)
}

pub fn leaky_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    activation(rng, Activation::LeakyRelu)
}

pub fn sigmoid(rng: &mut ChaCha8Rng) -> Result<f64> {
    activation(rng, Activation::Sigmoid)
}

pub fn tanh(rng: &mut ChaCha8Rng) -> Result<f64> {
    activation(rng, Activation::Tanh)
}

fn pool(rng: &mut ChaCha8Rng, kind: PoolKind, window: usize) -> Result<f64> {
    let x = randn(&[2, 3, 4, 4], rng);
    let seed: u64 = rng.random();
    finite_difference_check(
        |t, xv| {
            let y = t.pool(kind, xv, window)?;
            weighted_sum(t, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &x,
        STEP,
    )
}

pub fn max_pool(rng: &mut ChaCha8Rng) -> Result<f64> {
    pool(rng, PoolKind::Max, 2)
}

pub fn avg_pool(rng: &mut ChaCha8Rng) -> Result<f64> {
    pool(rng, PoolKind::Avg, 2)
}

pub fn global_avg_pool(rng: &mut ChaCha8Rng) -> Result<f64> {
    pool(rng, PoolKind::GlobalAvg, 1)
}

pub fn encoder_block(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut block: Block<f64> = Block::encoder(1, [3, 4, 4], 4, 2, rng)?;
    let x = randn(&[2, 3, 4, 4], rng);
    let seed: u64 = rng.random();
    let input = finite_difference_check(
        |t, xv| {
            let y = block.forward(t, xv, false)?;
            weighted_sum(t, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &x,
        STEP,
    )?;
    let params = finite_difference_check_params(
        &mut block,
        |b, t| {
            let xv = t.constant(x.clone());
            let y = b.forward(t, xv, true)?;
            weighted_sum(t, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        STEP,
        8,
    )?;
    Ok(input.max(params))
}

pub fn generator_stack(rng: &mut ChaCha8Rng) -> Result<f64> {
    let arch = ArchSpec {
        image_size: 8,
        widths: vec![3, 4, 5],
        downsample_first: true,
        ..ArchSpec::default()
    };
    let mut g: GeneratorStack<f64> = GeneratorStack::new(&arch, 4, 3, rng)?;
    let z = randn(&[2, 4], rng);
    let seed: u64 = rng.random();
    finite_difference_check_params(
        &mut g,
        |g, t| {
            let zv = t.constant(z.clone());
            let feats = g.forward(t, zv, true)?;
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let terms = feats
                .iter()
                .map(|&f| weighted_sum(t, f, &mut r))
                .collect::<Result<Vec<_>>>()?;
            t.add_all(&terms)
        },
        STEP,
        6,
    )
}

pub fn teacher_filter(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut f: TeacherFilter<f64> = TeacherFilter::new(4, 2, rng);
    let x = randn(&[2, 4, 3, 3], rng);
    let seed: u64 = rng.random();
    let input = finite_difference_check(
        |t, xv| {
            let y = f.apply(t, xv, false)?;
            weighted_sum(t, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &x,
        STEP,
    )?;
    let params = finite_difference_check_params(
        &mut f,
        |f, t| {
            let xv = t.constant(x.clone());
            let y = f.apply(t, xv, true)?;
            weighted_sum(t, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        STEP,
        10,
    )?;
    Ok(input.max(params))
}

pub fn teacher_net(rng: &mut ChaCha8Rng) -> Result<f64> {
    let arch = ArchSpec {
        image_size: 8,
        widths: vec![3, 4, 5],
        ..ArchSpec::default()
    };
    let mut net: TeacherNet<f64> = TeacherNet::new(&arch, vec!["a".into(), "b".into()], rng)?;
    let x = randn(&[2, 3, 8, 8], rng);
    let y = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0])?;
    finite_difference_check_params(
        &mut net,
        |n, t| {
            let xv = t.constant(x.clone());
            let (_, p) = n.forward(t, xv, true)?;
            t.bce_mean(p, &y)
        },
        STEP,
        4,
    )
}

pub fn one_hot(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = randn(&[4, 5], rng);
    finite_difference_check(
        |t, xv| {
            let y = sigmoid_of(t, xv);
            one_hot_loss(t, y, 0.5)
        },
        &x,
        STEP,
    )
}

pub fn discrete(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = randn(&[4, 5], rng);
    finite_difference_check(
        |t, xv| {
            let y = sigmoid_of(t, xv);
            Ok(discrete_loss(t, y))
        },
        &x,
        STEP,
    )
}

pub fn activation_term(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = randn(&[4, 6], rng);
    finite_difference_check(|t, xv| Ok(activation_loss(t, xv)), &x, STEP)
}

pub fn info_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = randn(&[5, 4], rng);
    finite_difference_check(
        |t, xv| {
            let y = sigmoid_of(t, xv);
            info_entropy_loss(t, y)
        },
        &x,
        STEP,
    )
}

fn loss_config(rng: &mut ChaCha8Rng) -> LossConfig {
    LossConfig {
        alpha: rng.random_range(0.05..1.0),
        beta: rng.random_range(0.5..5.0),
        gamma: rng.random_range(-1.0..1.0),
        ..LossConfig::default()
    }
}

pub fn gan(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = loss_config(rng);
    let x = randn(&[4, 9], rng);
    finite_difference_check(
        |t, xv| {
            let y = t.select_columns(xv, &[0, 1, 2, 3, 4])?;
            let y = sigmoid_of(t, y);
            let f = t.select_columns(xv, &[5, 6, 7, 8])?;
            Ok(gan_loss(t, y, f, &cfg)?.total)
        },
        &x,
        STEP,
    )
}

/// Only intermediate groups are perturbed: the image-group predictions are
/// a held constant target in the consistency term.
pub fn joint(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = loss_config(rng);
    let x = randn(&[4, 12], rng);
    let image = randn(&[4, 6], rng);
    finite_difference_check(
        |t, xv| {
            let iv = t.constant(image.clone());
            let mut groups = Vec::new();
            for (src, base) in [(xv, 0), (xv, 6), (iv, 0)] {
                let y = t.select_columns(src, &[base, base + 1, base + 2])?;
                let y = sigmoid_of(t, y);
                let f = t.select_columns(src, &[base + 3, base + 4, base + 5])?;
                groups.push(GroupOutput {
                    features: f,
                    predictions: y,
                });
            }
            Ok(joint_generator_loss(t, &groups, &cfg)?.total)
        },
        &x,
        STEP,
    )
}

pub fn dual_branch(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = randn(&[4, 6], rng);
    let target = probs(&[4, 6], rng);
    let task = TaskFilter::new(vec![1, 3, 4], 6)?;
    finite_difference_check(
        |t, xv| {
            let y = sigmoid_of(t, xv);
            dual_branch_loss(t, y, &target, &task)
        },
        &x,
        STEP,
    )
}

pub fn dual_block(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = LossConfig {
        lambda_m: vec![rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)],
        lambda_in1: rng.random_range(0.2..2.0),
        lambda_in2: rng.random_range(0.2..2.0),
        ..LossConfig::default()
    };
    let x = randn(&[3, 16], rng);
    let targets = [probs(&[3, 4], rng), probs(&[3, 4], rng)];
    let tasks = [TaskFilter::new(vec![0, 2], 4)?, TaskFilter::new(vec![1, 2, 3], 4)?];
    finite_difference_check(
        |t, xv| {
            let mut streams = [Vec::new(), Vec::new()];
            for (s, stream) in streams.iter_mut().enumerate() {
                for m in 0..2 {
                    let base = s * 8 + m * 4;
                    let cols: Vec<usize> = (base..base + 4).collect();
                    let y = t.select_columns(xv, &cols)?;
                    let y = sigmoid_of(t, y);
                    stream.push(dual_branch_loss(t, y, &targets[m], &tasks[m])?);
                }
            }
            dual_block_loss(t, &streams[0], &streams[1], &cfg)
        },
        &x,
        STEP,
    )
}

pub const CASES: &[(&str, Case)] = &[
    ("conv_stride1", conv_stride1),
    ("conv_stride2", conv_stride2),
    ("upsampling_conv", upsampling_conv),
    ("dense", dense),
    ("relu", relu),
    ("leaky_relu", leaky_relu),
    ("sigmoid", sigmoid),
    ("tanh", tanh),
    ("max_pool", max_pool),
    ("avg_pool", avg_pool),
    ("global_avg_pool", global_avg_pool),
    ("encoder_block", encoder_block),
    ("generator_stack", generator_stack),
    ("teacher_filter", teacher_filter),
    ("teacher_net", teacher_net),
    ("one_hot_loss", one_hot),
    ("discrete_loss", discrete),
    ("activation_loss", activation_term),
    ("info_entropy_loss", info_entropy),
    ("gan_loss", gan),
    ("joint_generator_loss", joint),
    ("dual_branch_loss", dual_branch),
    ("dual_block_loss", dual_block),
];

/// Worst relative error of `case` over `TRIALS` seeded trials.
pub fn worst_error(name: &str, case: Case) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
        worst = worst.max(case(&mut rng)?);
    }
    Ok(worst)
}

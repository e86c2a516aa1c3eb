use rand::Rng;

use super::{join, ArchSpec, Block, Conv, Dense, Direction, Layer, Module};
use crate::autodiff::{Activation, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Group-stack generator `{G^1..G^B}`.
///
/// Group `j` emits a map shaped like the input of teacher block `B - j + 1`,
/// so the last group emits the image.
#[derive(Clone, Debug)]
pub struct GeneratorStack<T: Element = f32> {
    pub groups: Vec<Block<T>>,
    pub noise_dim: usize,
    trained: bool,
}

impl<T: Element> GeneratorStack<T> {
    pub fn new<R: Rng + ?Sized>(arch: &ArchSpec, noise_dim: usize, seed_channels: usize, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if noise_dim == 0 || seed_channels == 0 {
            return Err(Error::Config("generator noise_dim and seed_channels must be positive".into()));
        }
        let b_total = arch.blocks();
        let mut groups = Vec::with_capacity(b_total);
        let mut prev: Option<[usize; 3]> = None;
        for j in 1..=b_total {
            let target = Self::target_shape(arch, j);
            let last = if j == b_total {
                Activation::Tanh
            } else {
                Activation::LeakyRelu
            };
            let group = match prev {
                None => {
                    let (seed_hw, factor) = if target[1] >= 2 && target[1] % 2 == 0 {
                        (target[1] / 2, 2)
                    } else {
                        (target[1], 1)
                    };
                    let up = if factor > 1 {
                        Conv::upsampling(seed_channels, target[0], 3, factor, rng)
                    } else {
                        Conv::new(seed_channels, target[0], 3, 1, rng)
                    };
                    let layers = vec![
                        Layer::Dense(Dense::new(noise_dim, seed_channels * seed_hw * seed_hw, rng)),
                        Layer::Reshape(vec![seed_channels, seed_hw, seed_hw]),
                        Layer::Act(Activation::LeakyRelu),
                        Layer::Conv(up),
                        Layer::Act(last),
                    ];
                    Block::new(j, Direction::Generator, layers, &[noise_dim])?
                }
                Some(p) => {
                    if target[1] % p[1] != 0 || target[2] % p[2] != 0 {
                        return Err(Error::invalid(
                            "generator",
                            format!("group {j} cannot grow {p:?} into {target:?}"),
                        ));
                    }
                    let factor = target[1] / p[1];
                    let up = if factor > 1 {
                        Conv::upsampling(p[0], target[0], 3, factor, rng)
                    } else {
                        Conv::new(p[0], target[0], 3, 1, rng)
                    };
                    let layers = vec![
                        Layer::Conv(up),
                        Layer::Act(Activation::LeakyRelu),
                        Layer::Conv(Conv::new(target[0], target[0], 3, 1, rng)),
                        Layer::Act(last),
                    ];
                    Block::new(j, Direction::Generator, layers, &p)?
                }
            };
            if group.output_shape() != target {
                return Err(Error::shape("generator", group.output_shape(), &target));
            }
            groups.push(group);
            prev = Some(target);
        }
        Ok(GeneratorStack {
            groups,
            noise_dim,
            trained: false,
        })
    }

    /// Per-sample shape of `F_gan^j`.
    pub fn target_shape(arch: &ArchSpec, j: usize) -> [usize; 3] {
        arch.block_input_shape(arch.blocks() - j + 1)
    }

    /// Whether Step I has completed (or a trained checkpoint was loaded).
    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        Tensor::randn(&[n, self.noise_dim], 1.0, rng)
    }

    /// `F_gan^1 = G^1(z)`, `F_gan^j = G^j(F_gan^{j-1})`; the last entry is the image.
    pub fn forward(&self, tape: &mut Tape<T>, z: Var, trainable: bool) -> Result<Vec<Var>> {
        if tape.shape(z).len() != 2 || tape.shape(z)[1] != self.noise_dim {
            return Err(Error::shape("generator", tape.shape(z), &[0, self.noise_dim]));
        }
        let mut out = Vec::with_capacity(self.groups.len());
        let mut h = z;
        for g in &self.groups {
            h = g.forward(tape, h, trainable)?;
            out.push(h);
        }
        Ok(out)
    }
}

impl<T: Element> Module<T> for GeneratorStack<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for g in &self.groups {
            g.visit_params(&join(prefix, &format!("group{}", g.index)), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for g in &mut self.groups {
            let idx = g.index;
            g.visit_params_mut(&join(prefix, &format!("group{idx}")), f);
        }
    }
}

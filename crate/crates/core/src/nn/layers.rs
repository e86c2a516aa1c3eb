use rand::Rng;

use super::{join, Module};
use crate::autodiff::{Activation, Param, PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// 2-d convolution with per-channel bias, optionally preceded by
/// nearest-neighbour upsampling.
#[derive(Clone, Debug)]
pub struct Conv<T: Element = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
    pub upsample: usize,
}

impl<T: Element> Conv<T> {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (in_c * kernel * kernel) as f64;
        Conv {
            weight: Param::new(Tensor::randn(&[out_c, in_c, kernel, kernel], (2.0 / fan_in).sqrt(), rng)),
            bias: Param::new(Tensor::zeros(&[out_c])),
            stride,
            padding: kernel / 2,
            upsample: 1,
        }
    }

    pub fn upsampling<R: Rng + ?Sized>(in_c: usize, out_c: usize, kernel: usize, factor: usize, rng: &mut R) -> Self {
        Conv {
            upsample: factor,
            ..Conv::new(in_c, out_c, kernel, 1, rng)
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, trainable: bool) -> Result<Var> {
        let w = tape.param(&self.weight, trainable);
        let b = tape.param(&self.bias, trainable);
        let y = if self.upsample > 1 {
            tape.upsample_conv(x, w, self.upsample)?
        } else {
            tape.conv2d(x, w, self.stride, self.padding)?
        };
        tape.add_channel_bias(y, b)
    }

    fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = s else {
            return Err(Error::invalid("conv", format!("expected [C, H, W], got {s:?}")));
        };
        if *c != self.in_channels() {
            return Err(Error::shape("conv", s, self.weight.value.shape()));
        }
        let k = self.kernel();
        let (h, w) = (h * self.upsample, w * self.upsample);
        let oh = (h + 2 * self.padding - k) / self.stride + 1;
        let ow = (w + 2 * self.padding - k) / self.stride + 1;
        Ok(vec![self.out_channels(), oh, ow])
    }
}

/// Fully connected layer, `x W + b`.
#[derive(Clone, Debug)]
pub struct Dense<T: Element = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> Dense<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Dense {
            weight: Param::new(Tensor::randn(&[d_in, d_out], (1.0 / d_in as f64).sqrt(), rng)),
            bias: Param::new(Tensor::zeros(&[d_out])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, trainable: bool) -> Result<Var> {
        let w = tape.param(&self.weight, trainable);
        let b = tape.param(&self.bias, trainable);
        tape.dense(x, w, b)
    }
}

impl<T: Element> Module<T> for Conv<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Element> Module<T> for Dense<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T: Element = f32> {
    Conv(Conv<T>),
    Dense(Dense<T>),
    Act(Activation),
    Pool(PoolKind, usize),
    /// Reshapes `[N, ...]` to `[N, shape...]`.
    Reshape(Vec<usize>),
}

impl<T: Element> Layer<T> {
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, trainable: bool) -> Result<Var> {
        match self {
            Layer::Conv(c) => c.forward(tape, x, trainable),
            Layer::Dense(d) => d.forward(tape, x, trainable),
            Layer::Act(a) => Ok(tape.elementwise(*a, x)),
            Layer::Pool(kind, window) => tape.pool(*kind, x, *window),
            Layer::Reshape(shape) => {
                let mut full = vec![tape.shape(x)[0]];
                full.extend_from_slice(shape);
                tape.reshape(x, &full)
            }
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv(c) => c.out_shape(s),
            Layer::Dense(d) => {
                if s != [d.inputs()] {
                    return Err(Error::shape("dense", s, d.weight.value.shape()));
                }
                Ok(vec![d.outputs()])
            }
            Layer::Act(_) => Ok(s.to_vec()),
            Layer::Pool(PoolKind::GlobalAvg, _) => Ok(vec![s[0], 1, 1]),
            Layer::Pool(_, w) => {
                if s.len() != 3 || s[1] % w != 0 || s[2] % w != 0 {
                    return Err(Error::invalid("pool", format!("window {w} does not divide {s:?}")));
                }
                Ok(vec![s[0], s[1] / w, s[2] / w])
            }
            Layer::Reshape(shape) => {
                if shape.iter().product::<usize>() != s.iter().product::<usize>() {
                    return Err(Error::shape("reshape", s, shape));
                }
                Ok(shape.clone())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Encoder,
    Generator,
}

/// One stage of a block-structured network.
#[derive(Clone, Debug)]
pub struct Block<T: Element = f32> {
    pub index: usize,
    pub direction: Direction,
    pub layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl<T: Element> Block<T> {
    /// Validates the layer chain against `input_shape` and the resolution
    /// rule of `direction`.
    pub fn new(index: usize, direction: Direction, layers: Vec<Layer<T>>, input_shape: &[usize]) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for layer in &layers {
            shape = layer.out_shape(&shape)?;
        }
        if input_shape.len() == 3 && shape.len() == 3 {
            let grows = shape[1] > input_shape[1] || shape[2] > input_shape[2];
            let shrinks = shape[1] < input_shape[1] || shape[2] < input_shape[2];
            match direction {
                Direction::Encoder if grows => {
                    return Err(Error::invalid("block", format!("encoder block {index} increases resolution")))
                }
                Direction::Generator if shrinks => {
                    return Err(Error::invalid("block", format!("generator block {index} decreases resolution")))
                }
                _ => {}
            }
        }
        Ok(Block {
            index,
            direction,
            layers,
            input_shape: input_shape.to_vec(),
            output_shape: shape,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, trainable: bool) -> Result<Var> {
        if tape.shape(x)[1..] != self.input_shape[..] {
            let mut expected = vec![tape.shape(x)[0]];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape("block", tape.shape(x), &expected));
        }
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(tape, h, trainable))
    }

    /// Two 3x3 convolutions with leaky-relu; the first one carries `stride`.
    pub fn encoder<R: Rng + ?Sized>(index: usize, input: [usize; 3], width: usize, stride: usize, rng: &mut R) -> Result<Self> {
        let layers = vec![
            Layer::Conv(Conv::new(input[0], width, 3, stride, rng)),
            Layer::Act(Activation::LeakyRelu),
            Layer::Conv(Conv::new(width, width, 3, 1, rng)),
            Layer::Act(Activation::LeakyRelu),
        ];
        Block::new(index, Direction::Encoder, layers, &input)
    }
}

impl<T: Element> Module<T> for Block<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer{i}"));
            match layer {
                Layer::Conv(c) => c.visit_params(&p, f),
                Layer::Dense(d) => d.visit_params(&p, f),
                _ => {}
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layer{i}"));
            match layer {
                Layer::Conv(c) => c.visit_params_mut(&p, f),
                Layer::Dense(d) => d.visit_params_mut(&p, f),
                _ => {}
            }
        }
    }
}

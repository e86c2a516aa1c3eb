//! Central finite-difference oracle for analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::Module;
use crate::tensor::{Element, Tensor};

/// Relative error with the `1e-8` floor used by every gradient oracle.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<T: Element, F>(f: &F, x: &Tensor<T>) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.scalar(out).as_f64())
}

/// Max over coordinates of `|analytic - central| / max(|analytic|, |central|, 1e-8)`
/// for the scalar function `f` at `x`.
pub fn finite_difference_check<T: Element, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = match tape.grad(xv) {
        Some(g) => g.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.numel()],
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::lit(step);
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - T::lit(step);
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Same oracle applied to a module's parameters.
///
/// `f` builds a scalar from the module on a fresh tape, binding parameters
/// as trainable. At most `per_param` evenly spaced coordinates of each
/// parameter are probed.
pub fn finite_difference_check_params<T, M, F>(module: &mut M, f: F, step: f64, per_param: usize) -> Result<f64>
where
    T: Element,
    M: Module<T>,
    F: Fn(&M, &mut Tape<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(module, &mut tape)?;
    tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    module.visit_params("", &mut |_, p| {
        let g = tape
            .param_grad(p)
            .map(|g| g.iter().map(|v| v.as_f64()).collect())
            .unwrap_or_else(|| vec![0.0; p.value.numel()]);
        analytic.push(g);
    });
    let mut targets: Vec<(usize, usize)> = Vec::new();
    for (pi, g) in analytic.iter().enumerate() {
        let stride = g.len().div_ceil(per_param.max(1)).max(1);
        targets.extend((0..g.len()).step_by(stride).map(|c| (pi, c)));
    }
    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(m, &mut tape)?;
        Ok(tape.scalar(out).as_f64())
    };
    let mut worst: f64 = 0.0;
    for (pi, c) in targets {
        let set = |m: &mut M, value: Option<T>| -> T {
            let mut k = 0;
            let mut previous = T::zero();
            m.visit_params_mut("", &mut |_, p| {
                if k == pi {
                    let v = &mut p.value.data_mut()[c];
                    previous = *v;
                    if let Some(value) = value {
                        *v = value;
                    }
                }
                k += 1;
            });
            previous
        };
        let orig = set(module, None);
        set(module, Some(orig + T::lit(step)));
        let plus = eval(module)?;
        set(module, Some(orig - T::lit(step)));
        let minus = eval(module)?;
        set(module, Some(orig));
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic[pi][c], numeric));
    }
    Ok(worst)
}

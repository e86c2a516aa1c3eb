//! Raw forward/backward kernels on flat slices.
//!
//! Convolutions lower each sample to a column matrix and run one GEMM per
//! sample, so a sample's output never depends on what else is in the batch.

use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Lowers one `[C, H, W]` sample into a `[C*kh*kw, Ho*Wo]` column matrix.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    let dst_row = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= g.height as isize {
                        dst_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, v) in dst_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        *v = if jj < 0 || jj >= g.width as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
pub fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.channels {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut dxc[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        if jj >= 0 && jj < g.width as isize {
                            dst[jj as usize] = dst[jj as usize] + src[oi * wo + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation of `[N, C, H, W]` input with a `[K, C, kh, kw]` kernel.
pub fn conv2d_forward<T: Element>(x: &[T], n: usize, k: usize, kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let in_per = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); n * k * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * plane]
    };
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let cols_ref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let os = &mut out[s * k * plane..(s + 1) * k * plane];
        T::gemm(k, g.patch(), plane, kernel, g.patch(), 1, cols_ref, plane, 1, T::zero(), os);
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. the input and/or the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    x: &[T],
    n: usize,
    k: usize,
    kernel: &[T],
    gout: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
) {
    let plane = g.out_h() * g.out_w();
    let in_per = g.channels * g.height * g.width;
    let patch = g.patch();
    let mut cols = vec![T::zero(); patch * plane];
    if let Some(dk) = dkernel {
        for s in 0..n {
            let xs = &x[s * in_per..(s + 1) * in_per];
            let cols_ref: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            let gs = &gout[s * k * plane..(s + 1) * k * plane];
            // dK[K, patch] += dY[K, plane] * cols^T
            T::gemm(k, plane, patch, gs, plane, 1, cols_ref, 1, plane, T::one(), dk);
        }
    }
    if let Some(dx) = dx {
        for s in 0..n {
            let gs = &gout[s * k * plane..(s + 1) * k * plane];
            // dcols[patch, plane] = K^T * dY
            T::gemm(patch, k, plane, kernel, 1, patch, gs, plane, 1, T::zero(), &mut cols);
            col2im_add(&cols, g, &mut dx[s * in_per..(s + 1) * in_per]);
        }
    }
}

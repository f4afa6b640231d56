//! Forward and backward kernels for convolution and batch normalization.
//!
//! Convolutions run as image-to-column transforms followed by a GEMM, one
//! sample at a time. Samples are processed in parallel, and every reduction
//! across samples is summed in sample order so results do not depend on the
//! thread count.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: usize,
    pub pad: usize,
    pub height: usize,
    pub width: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], groups: usize, pad: usize) -> Result<Self> {
        let [batch, in_channels, height, width] = *input else {
            return Err(Error::Shape(format!("conv input must be 4-D, got {input:?}")));
        };
        let [out_channels, in_per_group, kh, kw] = *weight else {
            return Err(Error::Shape(format!("conv weight must be 4-D, got {weight:?}")));
        };
        if kh != kw {
            return Err(Error::Shape(format!("non-square kernel {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::Shape(format!("even kernel size {kh} is not supported")));
        }
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::Shape(format!(
                "channels {in_channels} -> {out_channels} not divisible by {groups} groups"
            )));
        }
        if in_per_group * groups != in_channels {
            return Err(Error::Shape(format!(
                "weight expects {} input channels, input has {in_channels}",
                in_per_group * groups
            )));
        }
        let oh = (height + 2 * pad).checked_sub(kh - 1).filter(|&v| v > 0);
        let ow = (width + 2 * pad).checked_sub(kw - 1).filter(|&v| v > 0);
        let (Some(out_height), Some(out_width)) = (oh, ow) else {
            return Err(Error::Shape(format!(
                "kernel {kh} with padding {pad} too large for {height}x{width} input"
            )));
        };
        Ok(Self {
            batch,
            in_channels,
            out_channels,
            groups,
            kernel: kh,
            pad,
            height,
            width,
            out_height,
            out_width,
        })
    }

    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }
    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.kernel * self.kernel
    }
    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }
    fn in_plane(&self) -> usize {
        self.height * self.width
    }
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.pad == 0
    }
    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_height, self.out_width]
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (k, p) = (g.kernel, g.pad as isize);
    let (h, w) = (g.height as isize, g.width as isize);
    let n = g.out_plane();
    for ci in 0..g.cin_g() {
        let plane = &x[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..g.out_height {
                    let iy = oy as isize + ky as isize - p;
                    let dst = &mut row[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - p;
                        *d = if ix < 0 || ix >= w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (k, p) = (g.kernel, g.pad as isize);
    let (h, w) = (g.height as isize, g.width as isize);
    let n = g.out_plane();
    for ci in 0..g.cin_g() {
        let plane = &mut dx[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..g.out_height {
                    let iy = oy as isize + ky as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src = &row[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = ox as isize + kx as isize - p;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    groups: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), groups, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_channels] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {} output channels",
                b.shape(),
                g.out_channels
            )));
        }
    }
    let n = g.out_plane();
    let kk = g.col_rows();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_sample = g.in_channels * g.in_plane();
    let out_sample = g.out_channels * n;
    let mut out = vec![T::zero(); g.batch * out_sample];
    let xd = x.data();
    let wd = weight.data();

    out.par_chunks_mut(out_sample.max(1))
        .enumerate()
        .for_each(|(b, ob)| {
            let xb = &xd[b * in_sample..(b + 1) * in_sample];
            let mut col = if g.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); kk * n]
            };
            for gi in 0..g.groups {
                let xg = &xb[gi * cin_g * g.in_plane()..(gi + 1) * cin_g * g.in_plane()];
                let cols: &[T] = if g.is_pointwise() {
                    xg
                } else {
                    im2col(&g, xg, &mut col);
                    &col
                };
                let wg = &wd[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                let og = &mut ob[gi * cout_g * n..(gi + 1) * cout_g * n];
                T::gemm(
                    cout_g,
                    kk,
                    n,
                    T::one(),
                    wg,
                    kk as isize,
                    1,
                    cols,
                    n as isize,
                    1,
                    T::zero(),
                    og,
                    n as isize,
                    1,
                );
            }
            if let Some(bias) = bias {
                for (co, &bv) in bias.data().iter().enumerate() {
                    for v in &mut ob[co * n..(co + 1) * n] {
                        *v += bv;
                    }
                }
            }
        });
    Tensor::new(g.output_shape(), out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    groups: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), groups, pad)?;
    if dy.shape() != g.output_shape().as_slice() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match conv output {:?}",
            dy.shape(),
            g.output_shape()
        )));
    }
    let n = g.out_plane();
    let kk = g.col_rows();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_sample = g.in_channels * g.in_plane();
    let out_sample = g.out_channels * n;
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();

    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &xd[b * in_sample..(b + 1) * in_sample];
            let dyb = &dyd[b * out_sample..(b + 1) * out_sample];
            let mut dw = vec![T::zero(); weight.len()];
            let mut dx = if need_input_grad {
                vec![T::zero(); in_sample]
            } else {
                Vec::new()
            };
            let mut col = if g.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); kk * n]
            };
            let mut dcol = if g.is_pointwise() || !need_input_grad {
                Vec::new()
            } else {
                vec![T::zero(); kk * n]
            };
            for gi in 0..g.groups {
                let xg = &xb[gi * cin_g * g.in_plane()..(gi + 1) * cin_g * g.in_plane()];
                let cols: &[T] = if g.is_pointwise() {
                    xg
                } else {
                    im2col(&g, xg, &mut col);
                    &col
                };
                let dyg = &dyb[gi * cout_g * n..(gi + 1) * cout_g * n];
                let wg = &wd[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                // dW_g += dY_g · colsᵀ
                T::gemm(
                    cout_g,
                    n,
                    kk,
                    T::one(),
                    dyg,
                    n as isize,
                    1,
                    cols,
                    1,
                    n as isize,
                    T::one(),
                    &mut dw[gi * cout_g * kk..(gi + 1) * cout_g * kk],
                    kk as isize,
                    1,
                );
                if need_input_grad {
                    // dcols = W_gᵀ · dY_g
                    let range = gi * cin_g * g.in_plane()..(gi + 1) * cin_g * g.in_plane();
                    if g.is_pointwise() {
                        T::gemm(
                            kk,
                            cout_g,
                            n,
                            T::one(),
                            wg,
                            1,
                            kk as isize,
                            dyg,
                            n as isize,
                            1,
                            T::zero(),
                            &mut dx[range],
                            n as isize,
                            1,
                        );
                    } else {
                        T::gemm(
                            kk,
                            cout_g,
                            n,
                            T::one(),
                            wg,
                            1,
                            kk as isize,
                            dyg,
                            n as isize,
                            1,
                            T::zero(),
                            &mut dcol,
                            n as isize,
                            1,
                        );
                        col2im_add(&g, &dcol, &mut dx[range]);
                    }
                }
            }
            (dw, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); weight.len()];
    let mut dx = Vec::with_capacity(if need_input_grad { x.len() } else { 0 });
    for (pw, px) in per_sample {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        dx.extend(px);
    }
    let mut db = vec![T::zero(); g.out_channels];
    for b in 0..g.batch {
        for (co, acc) in db.iter_mut().enumerate() {
            let s = &dyd[b * out_sample + co * n..b * out_sample + (co + 1) * n];
            *acc += s.iter().copied().sum::<T>();
        }
    }
    Ok(ConvGrads {
        input: if need_input_grad {
            Some(Tensor::new(x.shape().to_vec(), dx)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.out_channels], db)?,
    })
}

/// Saved quantities from a training-mode batch-norm forward pass.
pub(crate) struct BatchNormSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased (population) batch variance per channel.
    pub var: Vec<T>,
}

fn check_bn_params<T: Scalar>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batch-norm affine parameters {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

pub(crate) fn batch_norm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let (b, c, h, w) = x.dims4()?;
    check_bn_params(c, gamma, beta)?;
    let plane = h * w;
    let count = T::from_f64((b * plane) as f64);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            s += xd[(bi * c + ci) * plane..][..plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for bi in 0..b {
            for &x in &xd[(bi * c + ci) * plane..][..plane] {
                v += (x - m) * (x - m);
            }
        }
        mean[ci] = m;
        var[ci] = v / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let (m, is, ga, be) = (mean[ci], inv_std[ci], gamma.data()[ci], beta.data()[ci]);
            for i in off..off + plane {
                let xh = (xd[i] - m) * is;
                xhat[i] = xh;
                y[i] = ga * xh + be;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BatchNormSaved {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_train_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = dy.dims4()?;
    let plane = h * w;
    let count = T::from_f64((b * plane) as f64);
    let dyd = dy.data();
    let xh = saved.xhat.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            for i in off..off + plane {
                dbeta[ci] += dyd[i];
                dgamma[ci] += dyd[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let ga = gamma.data()[ci];
            // dx = γ·inv_std/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
            let scale = ga * saved.inv_std[ci] / count;
            for i in off..off + plane {
                dx[i] = scale * (count * dyd[i] - dbeta[ci] - xh[i] * dgamma[ci]);
            }
        }
    }
    Ok((
        Tensor::new(dy.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Per-channel affine map `y = γ·(x − μ)·s + β` used by eval-mode batch norm.
pub(crate) fn channel_affine_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    check_bn_params(c, gamma, beta)?;
    let plane = h * w;
    let xd = x.data();
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let (m, is, ga, be) = (mean[ci], inv_std[ci], gamma.data()[ci], beta.data()[ci]);
            for i in off..off + plane {
                y[i] = ga * ((xd[i] - m) * is) + be;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

pub(crate) fn channel_affine_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    let plane = h * w;
    let (xd, dyd) = (x.data(), dy.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let (m, is, ga) = (mean[ci], inv_std[ci], gamma.data()[ci]);
            for i in off..off + plane {
                dx[i] = dyd[i] * ga * is;
                dgamma[ci] += dyd[i] * (xd[i] - m) * is;
                dbeta[ci] += dyd[i];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

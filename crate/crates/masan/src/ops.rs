//! Forward and backward kernels for every tensor operation.
//!
//! These are pure functions on [`Tensor`] values; the tape in [`crate::tape`]
//! records which kernel produced which node and replays the backward kernels
//! in reverse execution order. Results are bit-identical across runs and
//! thread counts: parallel sections only ever split work into disjoint
//! output slots, each computed in a fixed order, with any cross-slot
//! reduction merged sequentially in index order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{strides_of, Tensor};

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

/// Pointwise operation codes. Binary codes require exactly equal shapes;
/// there is no implicit broadcasting anywhere in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Abs,
}

impl EwOp {
    pub fn is_binary(self) -> bool {
        matches!(self, EwOp::Add | EwOp::Sub | EwOp::Mul)
    }

    pub fn name(self) -> &'static str {
        match self {
            EwOp::Add => "add",
            EwOp::Sub => "sub",
            EwOp::Mul => "mul",
            EwOp::Relu => "relu",
            EwOp::Sigmoid => "sigmoid",
            EwOp::Abs => "abs",
        }
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn elementwise_forward<T: Scalar>(
    op: EwOp,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let data = match (op, b) {
        (EwOp::Add, Some(b)) => zip_same_shape(op.name(), a, b)?
            .map(|(x, y)| x + y)
            .collect(),
        (EwOp::Sub, Some(b)) => zip_same_shape(op.name(), a, b)?
            .map(|(x, y)| x - y)
            .collect(),
        (EwOp::Mul, Some(b)) => zip_same_shape(op.name(), a, b)?
            .map(|(x, y)| x * y)
            .collect(),
        (EwOp::Relu, None) => a
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect(),
        (EwOp::Sigmoid, None) => a.data().iter().map(|&x| sigmoid_stable(x)).collect(),
        (EwOp::Abs, None) => a.data().iter().map(|&x| x.abs()).collect(),
        (op, b) => {
            return Err(Error::InvalidShape(format!(
                "elementwise {} called with wrong arity (b present: {})",
                op.name(),
                b.is_some()
            )))
        }
    };
    Tensor::from_vec(a.shape().to_vec(), data)
}

fn zip_same_shape<'a, T: Scalar>(
    op: &'static str,
    a: &'a Tensor<T>,
    b: &'a Tensor<T>,
) -> Result<impl Iterator<Item = (T, T)> + 'a> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(a.data().iter().copied().zip(b.data().iter().copied()))
}

/// Gradients of a binary/unary pointwise op given inputs, output and dy.
pub fn elementwise_backward<T: Scalar>(
    op: EwOp,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
    y: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Option<Tensor<T>>) {
    let n = a.numel();
    match op {
        EwOp::Add => (dy.clone(), Some(dy.clone())),
        EwOp::Sub => (dy.clone(), Some(dy.map(|g| -g))),
        EwOp::Mul => {
            let b = b.expect("mul is binary");
            let da: Vec<T> = (0..n).map(|i| dy.data()[i] * b.data()[i]).collect();
            let db: Vec<T> = (0..n).map(|i| dy.data()[i] * a.data()[i]).collect();
            (
                Tensor::from_vec(a.shape().to_vec(), da).unwrap(),
                Some(Tensor::from_vec(a.shape().to_vec(), db).unwrap()),
            )
        }
        EwOp::Relu => {
            let da: Vec<T> = (0..n)
                .map(|i| {
                    if a.data()[i] > T::zero() {
                        dy.data()[i]
                    } else {
                        T::zero()
                    }
                })
                .collect();
            (Tensor::from_vec(a.shape().to_vec(), da).unwrap(), None)
        }
        EwOp::Sigmoid => {
            let da: Vec<T> = (0..n)
                .map(|i| {
                    let s = y.data()[i];
                    dy.data()[i] * s * (T::one() - s)
                })
                .collect();
            (Tensor::from_vec(a.shape().to_vec(), da).unwrap(), None)
        }
        EwOp::Abs => {
            let da: Vec<T> = (0..n)
                .map(|i| {
                    let x = a.data()[i];
                    if x > T::zero() {
                        dy.data()[i]
                    } else if x < T::zero() {
                        -dy.data()[i]
                    } else {
                        T::zero()
                    }
                })
                .collect();
            (Tensor::from_vec(a.shape().to_vec(), da).unwrap(), None)
        }
    }
}

pub fn scale_forward<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|x| x * c)
}

// ---------------------------------------------------------------------------
// Matmul / transpose
// ---------------------------------------------------------------------------

pub fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::InnerDimMismatch {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    // i-l-j order: fixed accumulation order per cell, inner loop contiguous.
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &bd[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let bt = transpose2d_forward(b);
    let at = transpose2d_forward(a);
    let da = matmul_forward(dy, &bt).unwrap();
    let db = matmul_forward(&at, dy).unwrap();
    (da, db)
}

pub fn transpose2d_forward<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.rank(), 2, "transpose2d needs rank 2");
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], out).unwrap()
}

// ---------------------------------------------------------------------------
// 3D convolution (optionally grouped)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Conv3dDims {
    pub batch: usize,
    pub cin: usize,
    pub din: usize,
    pub hin: usize,
    pub win: usize,
    pub fout: usize,
    pub cpg: usize,
    pub fpg: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub dout: usize,
    pub hout: usize,
    pub wout: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv3dDims {
    pub fn infer(
        x: &[usize],
        w: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if x.len() != 5 || w.len() != 5 {
            return Err(Error::InvalidShape(format!(
                "conv3d expects rank-5 input/weight, got {x:?} / {w:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidShape("conv3d stride must be >= 1".into()));
        }
        let (batch, cin, din, hin, win) = (x[0], x[1], x[2], x[3], x[4]);
        let (fout, cpg, kd, kh, kw) = (w[0], w[1], w[2], w[3], w[4]);
        if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape(format!(
                "conv3d kernel extents must be odd, got {kd}x{kh}x{kw}"
            )));
        }
        if groups == 0 || cin % groups != 0 || fout % groups != 0 || cpg != cin / groups {
            return Err(Error::BadGroupCount {
                channels: cin,
                groups,
            });
        }
        if bias != [fout] {
            return Err(Error::ShapeMismatch {
                op: "conv3d bias",
                lhs: bias.to_vec(),
                rhs: vec![fout],
            });
        }
        let padded = [din + 2 * padding, hin + 2 * padding, win + 2 * padding];
        if padded[0] < kd || padded[1] < kh || padded[2] < kw {
            return Err(Error::KernelTooLarge {
                kernel: vec![kd, kh, kw],
                padded: padded.to_vec(),
            });
        }
        Ok(Conv3dDims {
            batch,
            cin,
            din,
            hin,
            win,
            fout,
            cpg,
            fpg: fout / groups,
            kd,
            kh,
            kw,
            dout: (padded[0] - kd) / stride + 1,
            hout: (padded[1] - kh) / stride + 1,
            wout: (padded[2] - kw) / stride + 1,
            stride,
            padding,
            groups,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.fout, self.dout, self.hout, self.wout]
    }
}

/// Output positions whose tap stays inside the input:
/// `lo..hi` such that `0 <= o*stride + offset < in_len` for o in that range.
fn conv_span(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi_num = in_len as isize - 1 - offset;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Zero-padded 3D cross-correlation. `groups > 1` splits channels into
/// independent blocks (used to run the per-patch sub-networks as one call).
/// Tap-major loop order with precomputed valid spans keeps the inner row
/// loops branch-free.
pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let dm = Conv3dDims::infer(x.shape(), w.shape(), bias.shape(), stride, padding, groups)?;
    let xd = x.data();
    let wd = w.data();
    let bd = bias.data();
    let mut out = vec![T::zero(); dm.batch * dm.fout * dm.dout * dm.hout * dm.wout];

    let x_c = dm.din * dm.hin * dm.win;
    let x_n = dm.cin * x_c;
    let x_d = dm.hin * dm.win;
    let w_c = dm.kd * dm.kh * dm.kw;
    let w_f = dm.cpg * w_c;
    let o_f = dm.dout * dm.hout * dm.wout;
    let o_d = dm.hout * dm.wout;
    let p = dm.padding as isize;
    let s = dm.stride;

    // one disjoint output slot per (n, f); safe to fill in parallel
    out.par_chunks_mut(o_f).enumerate().for_each(|(nf, orow)| {
        let n = nf / dm.fout;
        let f = nf % dm.fout;
        let g = f / dm.fpg;
        let xg = n * x_n + g * dm.cpg * x_c;
        orow.fill(bd[f]);
        for c in 0..dm.cpg {
            let xc = xg + c * x_c;
            let wc = f * w_f + c * w_c;
            for kd in 0..dm.kd {
                let off_d = kd as isize - p;
                let (d_lo, d_hi) = conv_span(dm.dout, dm.din, s, off_d);
                for kh in 0..dm.kh {
                    let off_h = kh as isize - p;
                    let (h_lo, h_hi) = conv_span(dm.hout, dm.hin, s, off_h);
                    for kw in 0..dm.kw {
                        let off_w = kw as isize - p;
                        let (w_lo, w_hi) = conv_span(dm.wout, dm.win, s, off_w);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let tap = wd[wc + (kd * dm.kh + kh) * dm.kw + kw];
                        for od in d_lo..d_hi {
                            let id = (od * s) as isize + off_d;
                            let xrow_d = xc + id as usize * x_d;
                            for oh in h_lo..h_hi {
                                let ih = (oh * s) as isize + off_h;
                                let xrow = xrow_d + ih as usize * dm.win;
                                let ob = od * o_d + oh * dm.wout;
                                let iw0 = (w_lo * s) as isize + off_w;
                                if s == 1 {
                                    let xs = &xd[xrow + iw0 as usize
                                        ..xrow + iw0 as usize + (w_hi - w_lo)];
                                    let os = &mut orow[ob + w_lo..ob + w_hi];
                                    for (o, &xv) in os.iter_mut().zip(xs) {
                                        *o += tap * xv;
                                    }
                                } else {
                                    for ow in w_lo..w_hi {
                                        let iw = (ow * s) as isize + off_w;
                                        orow[ob + ow] += tap * xd[xrow + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(dm.out_shape(), out)
}

/// Backward pass producing dx, dw, db from dy; same tap-major structure.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let dm = Conv3dDims::infer(
        x.shape(),
        w.shape(),
        &[w.shape()[0]],
        stride,
        padding,
        groups,
    )
    .expect("shapes validated at forward time");
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); wd.len()];
    let mut db = vec![T::zero(); dm.fout];

    let x_c = dm.din * dm.hin * dm.win;
    let x_n = dm.cin * x_c;
    let x_d = dm.hin * dm.win;
    let w_c = dm.kd * dm.kh * dm.kw;
    let w_f = dm.cpg * w_c;
    let o_f = dm.dout * dm.hout * dm.wout;
    let o_n = dm.fout * o_f;
    let o_d = dm.hout * dm.wout;
    let p = dm.padding as isize;
    let s = dm.stride;

    // per-sample dx slots are disjoint; dw/db partials are merged in batch
    // order afterwards so the reduction order never depends on scheduling
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(x_n)
        .enumerate()
        .map(|(n, dxn)| {
            let mut dw_n = vec![T::zero(); wd.len()];
            let mut db_n = vec![T::zero(); dm.fout];
            for f in 0..dm.fout {
                let g = f / dm.fpg;
                let xg0 = g * dm.cpg * x_c;
                let ob = n * o_n + f * o_f;
                for &gy in &dyd[ob..ob + o_f] {
                    db_n[f] += gy;
                }
                for c in 0..dm.cpg {
                    let xc_local = xg0 + c * x_c;
                    let wc = f * w_f + c * w_c;
                    for kd in 0..dm.kd {
                        let off_d = kd as isize - p;
                        let (d_lo, d_hi) = conv_span(dm.dout, dm.din, s, off_d);
                        for kh in 0..dm.kh {
                            let off_h = kh as isize - p;
                            let (h_lo, h_hi) = conv_span(dm.hout, dm.hin, s, off_h);
                            for kw in 0..dm.kw {
                                let off_w = kw as isize - p;
                                let (w_lo, w_hi) = conv_span(dm.wout, dm.win, s, off_w);
                                if w_lo >= w_hi {
                                    continue;
                                }
                                let wi = wc + (kd * dm.kh + kh) * dm.kw + kw;
                                let tap = wd[wi];
                                let mut tap_grad = T::zero();
                                for od in d_lo..d_hi {
                                    let id = (od * s) as isize + off_d;
                                    let xrow_d = xc_local + id as usize * x_d;
                                    for oh in h_lo..h_hi {
                                        let ih = (oh * s) as isize + off_h;
                                        let xrow = xrow_d + ih as usize * dm.win;
                                        let orow = ob + od * o_d + oh * dm.wout;
                                        let iw0 = (w_lo * s) as isize + off_w;
                                        if s == 1 {
                                            let base = xrow + iw0 as usize;
                                            let gys = &dyd[orow + w_lo..orow + w_hi];
                                            let xs = &xd[n * x_n + base
                                                ..n * x_n + base + (w_hi - w_lo)];
                                            let dxs =
                                                &mut dxn[base..base + (w_hi - w_lo)];
                                            for i in 0..gys.len() {
                                                tap_grad += xs[i] * gys[i];
                                                dxs[i] += tap * gys[i];
                                            }
                                        } else {
                                            for ow in w_lo..w_hi {
                                                let iw =
                                                    ((ow * s) as isize + off_w) as usize;
                                                let gy = dyd[orow + ow];
                                                tap_grad += xd[n * x_n + xrow + iw] * gy;
                                                dxn[xrow + iw] += tap * gy;
                                            }
                                        }
                                    }
                                }
                                dw_n[wi] += tap_grad;
                            }
                        }
                    }
                }
            }
            (dw_n, db_n)
        })
        .collect();
    for (dw_n, db_n) in partials {
        for (acc, v) in dw.iter_mut().zip(&dw_n) {
            *acc += *v;
        }
        for (acc, v) in db.iter_mut().zip(&db_n) {
            *acc += *v;
        }
    }
    (
        Tensor::from_vec(x.shape().to_vec(), dx).unwrap(),
        Tensor::from_vec(w.shape().to_vec(), dw).unwrap(),
        Tensor::from_vec(vec![dm.fout], db).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// Trilinear 2x upsampling (corner-aligned)
// ---------------------------------------------------------------------------

fn lerp_taps<T: Scalar>(in_len: usize) -> Vec<(usize, usize, T)> {
    let out_len = 2 * in_len;
    (0..out_len)
        .map(|o| {
            if in_len == 1 {
                return (0, 0, T::zero());
            }
            let pos = lit::<T>(o as f64) * lit::<T>((in_len - 1) as f64)
                / lit::<T>((out_len - 1) as f64);
            let i0f = pos.floor();
            let i0 = i0f.to_usize().unwrap().min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, pos - i0f)
        })
        .collect()
}

pub fn upsample_trilinear2x_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::InvalidShape(format!(
            "upsample expects rank-5 input, got {s:?}"
        )));
    }
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let taps_d = lerp_taps::<T>(d);
    let taps_h = lerp_taps::<T>(h);
    let taps_w = lerp_taps::<T>(w);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * 8 * d * h * w];
    let one = T::one();
    let mut oi = 0usize;
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for &(d0, d1, fd) in &taps_d {
            for &(h0, h1, fh) in &taps_h {
                let b00 = base + (d0 * h + h0) * w;
                let b01 = base + (d0 * h + h1) * w;
                let b10 = base + (d1 * h + h0) * w;
                let b11 = base + (d1 * h + h1) * w;
                for &(w0, w1, fw) in &taps_w {
                    let c00 = xd[b00 + w0] * (one - fw) + xd[b00 + w1] * fw;
                    let c01 = xd[b01 + w0] * (one - fw) + xd[b01 + w1] * fw;
                    let c10 = xd[b10 + w0] * (one - fw) + xd[b10 + w1] * fw;
                    let c11 = xd[b11 + w0] * (one - fw) + xd[b11 + w1] * fw;
                    let c0 = c00 * (one - fh) + c01 * fh;
                    let c1 = c10 * (one - fh) + c11 * fh;
                    out[oi] = c0 * (one - fd) + c1 * fd;
                    oi += 1;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, c, 2 * d, 2 * h, 2 * w], out)
}

pub fn upsample_trilinear2x_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let taps_d = lerp_taps::<T>(d);
    let taps_h = lerp_taps::<T>(h);
    let taps_w = lerp_taps::<T>(w);
    let dyd = dy.data();
    let mut dx = vec![T::zero(); x.numel()];
    let one = T::one();
    let mut oi = 0usize;
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for &(d0, d1, fd) in &taps_d {
            for &(h0, h1, fh) in &taps_h {
                let b00 = base + (d0 * h + h0) * w;
                let b01 = base + (d0 * h + h1) * w;
                let b10 = base + (d1 * h + h0) * w;
                let b11 = base + (d1 * h + h1) * w;
                for &(w0, w1, fw) in &taps_w {
                    let g = dyd[oi];
                    oi += 1;
                    let g0 = g * (one - fd);
                    let g1 = g * fd;
                    let g00 = g0 * (one - fh);
                    let g01 = g0 * fh;
                    let g10 = g1 * (one - fh);
                    let g11 = g1 * fh;
                    dx[b00 + w0] += g00 * (one - fw);
                    dx[b00 + w1] += g00 * fw;
                    dx[b01 + w0] += g01 * (one - fw);
                    dx[b01 + w1] += g01 * fw;
                    dx[b10 + w0] += g10 * (one - fw);
                    dx[b10 + w1] += g10 * fw;
                    dx[b11 + w0] += g11 * (one - fw);
                    dx[b11 + w1] += g11 * fw;
                }
            }
        }
    }
    Tensor::from_vec(s.to_vec(), dx).unwrap()
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

/// Channel count -> group count: min(8, C) when it divides C, else 1.
pub fn default_group_count(channels: usize) -> usize {
    let g = channels.min(8);
    if g > 0 && channels % g == 0 {
        g
    } else {
        1
    }
}

fn gn_dims<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::InvalidShape(format!(
            "group_norm expects rank >= 2, got {s:?}"
        )));
    }
    let c = s[1];
    if groups == 0 || c % groups != 0 {
        return Err(Error::BadGroupCount {
            channels: c,
            groups,
        });
    }
    let spatial: usize = s[2..].iter().product();
    Ok((s[0], c, spatial))
}

pub fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c, spatial) = gn_dims(x, groups)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "group_norm affine",
            lhs: gamma.shape().to_vec(),
            rhs: vec![c],
        });
    }
    if eps <= T::zero() {
        return Err(Error::InvalidShape("group_norm eps must be > 0".into()));
    }
    let cpg = c / groups;
    let m = lit::<T>((cpg * spatial) as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for ni in 0..n {
        for g in 0..groups {
            let start = (ni * c + g * cpg) * spatial;
            let block = &xd[start..start + cpg * spatial];
            let mean = block.iter().fold(T::zero(), |a, &v| a + v) / m;
            let var = block
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / m;
            let inv_std = T::one() / (var + eps).sqrt();
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                let ga = gamma.data()[ch];
                let be = beta.data()[ch];
                let row = start + cc * spatial;
                for sp in 0..spatial {
                    out[row + sp] = ga * (xd[row + sp] - mean) * inv_std + be;
                }
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, spatial) = gn_dims(x, groups).expect("validated at forward");
    let cpg = c / groups;
    let m = lit::<T>((cpg * spatial) as f64);
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = vec![T::zero(); xd.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for g in 0..groups {
            let start = (ni * c + g * cpg) * spatial;
            let block = &xd[start..start + cpg * spatial];
            let mean = block.iter().fold(T::zero(), |a, &v| a + v) / m;
            let var = block
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / m;
            let inv_std = T::one() / (var + eps).sqrt();

            // Accumulate the two group-level sums of ghat and ghat*xhat.
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                let ga = gamma.data()[ch];
                let row = start + cc * spatial;
                for sp in 0..spatial {
                    let xhat = (xd[row + sp] - mean) * inv_std;
                    let gy = dyd[row + sp];
                    dgamma[ch] += gy * xhat;
                    dbeta[ch] += gy;
                    sum_g += gy * ga;
                    sum_gx += gy * ga * xhat;
                }
            }
            let mean_g = sum_g / m;
            let mean_gx = sum_gx / m;
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                let ga = gamma.data()[ch];
                let row = start + cc * spatial;
                for sp in 0..spatial {
                    let xhat = (xd[row + sp] - mean) * inv_std;
                    dx[row + sp] = inv_std * (dyd[row + sp] * ga - mean_g - xhat * mean_gx);
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape().to_vec(), dx).unwrap(),
        Tensor::from_vec(vec![c], dgamma).unwrap(),
        Tensor::from_vec(vec![c], dbeta).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

fn axis_split<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= x.rank() {
        return Err(Error::InvalidAxis {
            axis,
            rank: x.rank(),
        });
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x, axis)?;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = xd[base];
            for j in 1..len {
                let v = xd[base + j * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (xd[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] / sum;
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, axis: usize, dy: &Tensor<T>) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y, axis).expect("validated at forward");
    let yd = y.data();
    let dyd = dy.data();
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                let k = base + j * inner;
                dot += dyd[k] * yd[k];
            }
            for j in 0..len {
                let k = base + j * inner;
                dx[k] = yd[k] * (dyd[k] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape().to_vec(), dx).unwrap()
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

impl ReduceOp {
    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
        }
    }
}

pub fn reduce_out_shape(
    shape: &[usize],
    axes: &[usize],
    keep_dims: bool,
) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::InvalidAxis {
                axis: a,
                rank: shape.len(),
            });
        }
        if seen[a] {
            return Err(Error::InvalidShape(format!("duplicate reduce axis {a}")));
        }
        seen[a] = true;
    }
    let mut out = Vec::new();
    for (d, &e) in shape.iter().enumerate() {
        if seen[d] {
            if keep_dims {
                out.push(1);
            }
        } else {
            out.push(e);
        }
    }
    if out.is_empty() {
        out.push(1); // full reduction collapses to a scalar of shape [1]
    }
    Ok(out)
}

/// Result of a reduction: the output plus, for max, the winning input index
/// (first occurrence) per output slot.
#[derive(Debug)]
pub struct Reduced<T: Scalar> {
    pub out: Tensor<T>,
    pub argmax: Option<Vec<usize>>,
    pub count: usize,
}

pub fn reduce_forward<T: Scalar>(
    op: ReduceOp,
    x: &Tensor<T>,
    axes: &[usize],
    keep_dims: bool,
) -> Result<Reduced<T>> {
    let out_shape = reduce_out_shape(x.shape(), axes, keep_dims)?;
    let out_numel: usize = out_shape.iter().product();
    let reduced: Vec<bool> = {
        let mut r = vec![false; x.rank()];
        for &a in axes {
            r[a] = true;
        }
        r
    };
    let count: usize = x
        .shape()
        .iter()
        .enumerate()
        .filter(|(d, _)| reduced[*d])
        .map(|(_, &e)| e)
        .product();

    // Stride of each input dim in the output (0 for reduced dims).
    let mut out_strides_for_in = vec![0usize; x.rank()];
    {
        let mut stride = 1usize;
        for d in (0..x.rank()).rev() {
            if !reduced[d] {
                out_strides_for_in[d] = stride;
                stride *= x.shape()[d];
            }
        }
    }

    let xd = x.data();
    let mut out;
    let mut argmax = None;
    match op {
        ReduceOp::Sum | ReduceOp::Mean => {
            out = vec![T::zero(); out_numel];
            walk(x.shape(), |in_flat, idx| {
                let o = out_index(idx, &out_strides_for_in);
                out[o] += xd[in_flat];
            });
            if op == ReduceOp::Mean {
                let c = lit::<T>(count as f64);
                for v in out.iter_mut() {
                    *v = *v / c;
                }
            }
        }
        ReduceOp::Max => {
            out = vec![T::neg_infinity(); out_numel];
            let mut arg = vec![0usize; out_numel];
            walk(x.shape(), |in_flat, idx| {
                let o = out_index(idx, &out_strides_for_in);
                if xd[in_flat] > out[o] || out[o] == T::neg_infinity() {
                    // strict > keeps the first occurrence on ties
                    if xd[in_flat] > out[o] {
                        out[o] = xd[in_flat];
                        arg[o] = in_flat;
                    } else if out[o] == T::neg_infinity() {
                        out[o] = xd[in_flat];
                        arg[o] = in_flat;
                    }
                }
            });
            argmax = Some(arg);
        }
    }
    Ok(Reduced {
        out: Tensor::from_vec(out_shape, out)?,
        argmax,
        count,
    })
}

fn out_index(idx: &[usize], strides: &[usize]) -> usize {
    idx.iter().zip(strides).map(|(i, s)| i * s).sum()
}

/// Visit every flat index of `shape` in row-major order with its coordinates.
fn walk(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let numel: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..numel {
        f(flat, &idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn reduce_backward<T: Scalar>(
    op: ReduceOp,
    x_shape: &[usize],
    axes: &[usize],
    keep_dims: bool,
    dy: &Tensor<T>,
    argmax: Option<&[usize]>,
    count: usize,
) -> Tensor<T> {
    let numel: usize = x_shape.iter().product();
    let mut dx = vec![T::zero(); numel];
    match op {
        ReduceOp::Sum | ReduceOp::Mean => {
            let reduced: Vec<bool> = {
                let mut r = vec![false; x_shape.len()];
                for &a in axes {
                    r[a] = true;
                }
                r
            };
            let mut out_strides_for_in = vec![0usize; x_shape.len()];
            let mut stride = 1usize;
            for d in (0..x_shape.len()).rev() {
                if !reduced[d] {
                    out_strides_for_in[d] = stride;
                    stride *= x_shape[d];
                }
            }
            let scale = if op == ReduceOp::Mean {
                T::one() / lit::<T>(count as f64)
            } else {
                T::one()
            };
            let dyd = dy.data();
            walk(x_shape, |in_flat, idx| {
                let o = out_index(idx, &out_strides_for_in);
                dx[in_flat] = dyd[o] * scale;
            });
        }
        ReduceOp::Max => {
            let arg = argmax.expect("max reduction saved argmax");
            for (o, &src) in arg.iter().enumerate() {
                dx[src] += dy.data()[o];
            }
        }
    }
    let _ = keep_dims;
    Tensor::from_vec(x_shape.to_vec(), dx).unwrap()
}

// ---------------------------------------------------------------------------
// Concatenation
// ---------------------------------------------------------------------------

pub fn concat_forward<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidShape("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::InvalidAxis {
            axis,
            rank: first.rank(),
        });
    }
    let mut axis_total = 0usize;
    for x in xs {
        if x.rank() != first.rank() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        for d in 0..first.rank() {
            if d != axis && x.shape()[d] != first.shape()[d] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
        }
        axis_total += x.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * axis_total * inner];
    let row_out = axis_total * inner;
    let mut offset = 0usize;
    for x in xs {
        let rows = x.shape()[axis] * inner;
        for o in 0..outer {
            let src = &x.data()[o * rows..(o + 1) * rows];
            let dst = &mut out[o * row_out + offset..o * row_out + offset + rows];
            dst.copy_from_slice(src);
        }
        offset += rows;
    }
    Tensor::from_vec(out_shape, out)
}

pub fn concat_backward<T: Scalar>(
    shapes: &[Vec<usize>],
    axis: usize,
    dy: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let row_out = dy.shape()[axis] * inner;
    let mut grads = Vec::with_capacity(shapes.len());
    let mut offset = 0usize;
    for shape in shapes {
        let rows = shape[axis] * inner;
        let mut dx = vec![T::zero(); shape.iter().product()];
        for o in 0..outer {
            let src = &dy.data()[o * row_out + offset..o * row_out + offset + rows];
            dx[o * rows..(o + 1) * rows].copy_from_slice(src);
        }
        offset += rows;
        grads.push(Tensor::from_vec(shape.clone(), dx).unwrap());
    }
    grads
}

// ---------------------------------------------------------------------------
// Explicit broadcast (expand) — gates are expanded before multiplication
// ---------------------------------------------------------------------------

pub fn expand_forward<T: Scalar>(x: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    if x.rank() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "expand",
            lhs: x.shape().to_vec(),
            rhs: target.to_vec(),
        });
    }
    for d in 0..x.rank() {
        if x.shape()[d] != target[d] && x.shape()[d] != 1 {
            return Err(Error::ShapeMismatch {
                op: "expand",
                lhs: x.shape().to_vec(),
                rhs: target.to_vec(),
            });
        }
    }
    let in_strides = strides_of(x.shape());
    let eff: Vec<usize> = (0..x.rank())
        .map(|d| if x.shape()[d] == 1 { 0 } else { in_strides[d] })
        .collect();
    let numel: usize = target.iter().product();
    let mut out = vec![T::zero(); numel];
    let xd = x.data();
    walk(target, |out_flat, idx| {
        let src: usize = idx.iter().zip(&eff).map(|(i, s)| i * s).sum();
        out[out_flat] = xd[src];
    });
    Tensor::from_vec(target.to_vec(), out)
}

pub fn expand_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let in_strides = strides_of(x_shape);
    let eff: Vec<usize> = (0..x_shape.len())
        .map(|d| if x_shape[d] == 1 { 0 } else { in_strides[d] })
        .collect();
    let mut dx = vec![T::zero(); x_shape.iter().product()];
    let dyd = dy.data();
    walk(dy.shape(), |out_flat, idx| {
        let src: usize = idx.iter().zip(&eff).map(|(i, s)| i * s).sum();
        dx[src] += dyd[out_flat];
    });
    Tensor::from_vec(x_shape.to_vec(), dx).unwrap()
}

// ---------------------------------------------------------------------------
// Axis-0 select (per-sample slices for the attention loop)
// ---------------------------------------------------------------------------

pub fn index_axis0_forward<T: Scalar>(x: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::InvalidShape(format!(
            "index_axis0 needs rank >= 2, got {:?}",
            x.shape()
        )));
    }
    if i >= x.shape()[0] {
        return Err(Error::IndexOutOfRange {
            index: i,
            extent: x.shape()[0],
        });
    }
    let sub: usize = x.shape()[1..].iter().product();
    let data = x.data()[i * sub..(i + 1) * sub].to_vec();
    Tensor::from_vec(x.shape()[1..].to_vec(), data)
}

pub fn index_axis0_backward<T: Scalar>(x_shape: &[usize], i: usize, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = vec![T::zero(); x_shape.iter().product()];
    let sub: usize = x_shape[1..].iter().product();
    dx[i * sub..(i + 1) * sub].copy_from_slice(dy.data());
    Tensor::from_vec(x_shape.to_vec(), dx).unwrap()
}

// ---------------------------------------------------------------------------
// Element permutation (region grid assembly)
// ---------------------------------------------------------------------------

/// Gather: `out[k] = x[map[k]]`. `map` must be a bijection for the backward
/// scatter to be exact.
pub fn gather_forward<T: Scalar>(x: &Tensor<T>, map: &[usize], out_shape: &[usize]) -> Tensor<T> {
    debug_assert_eq!(map.len(), out_shape.iter().product::<usize>());
    let xd = x.data();
    let out: Vec<T> = map.iter().map(|&src| xd[src]).collect();
    Tensor::from_vec(out_shape.to_vec(), out).unwrap()
}

pub fn gather_backward<T: Scalar>(x_shape: &[usize], map: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = vec![T::zero(); x_shape.iter().product()];
    for (k, &src) in map.iter().enumerate() {
        dx[src] += dy.data()[k];
    }
    Tensor::from_vec(x_shape.to_vec(), dx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let y = elementwise_forward(EwOp::Relu, &t(&[3], &[-1.0, 0.0, 2.0]), None).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mul_pointwise() {
        let y = elementwise_forward(
            EwOp::Mul,
            &t(&[3], &[1.0, 2.0, 3.0]),
            Some(&t(&[3], &[4.0, 5.0, 6.0])),
        )
        .unwrap();
        assert_eq!(y.data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let y = elementwise_forward(EwOp::Sigmoid, &t(&[1], &[0.0]), None).unwrap();
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn binary_shape_mismatch_names_both_shapes() {
        let err = elementwise_forward(EwOp::Add, &t(&[2], &[1.0, 2.0]), Some(&t(&[3], &[0.0; 3])))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn matmul_identity() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = matmul_forward(&id, &a).unwrap();
        assert_eq!(y.data(), a.data());
    }

    #[test]
    fn matmul_row_by_column() {
        let y = matmul_forward(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let a = Tensor::<f32>::randn(vec![3, 4], &mut rng).unwrap();
        let b = Tensor::<f32>::randn(vec![4, 2], &mut rng).unwrap();
        let y = matmul_forward(&a, &b).unwrap();
        // independent oracle: naive i-j-l loop
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0f32;
                for l in 0..4 {
                    acc += a.at(&[i, l]) * b.at(&[l, j]);
                }
                assert!((acc - y.at(&[i, j])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_inner_dim_error() {
        let err = matmul_forward(&t(&[2, 3], &[0.0; 6]), &t(&[2, 2], &[0.0; 4])).unwrap_err();
        assert!(matches!(err, Error::InnerDimMismatch { .. }));
    }

    #[test]
    fn conv3d_all_ones_center_is_27() {
        let x = Tensor::<f32>::ones(vec![1, 1, 4, 4, 4]).unwrap();
        let w = Tensor::<f32>::ones(vec![1, 1, 3, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(vec![1]).unwrap();
        let y = conv3d_forward(&x, &w, &b, 1, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
        // interior voxels see the full 3x3x3 window
        assert_eq!(y.at(&[0, 0, 1, 1, 1]), 27.0);
        assert_eq!(y.at(&[0, 0, 2, 2, 2]), 27.0);
        // corner sees a 2x2x2 window
        assert_eq!(y.at(&[0, 0, 0, 0, 0]), 8.0);
    }

    #[test]
    fn conv3d_stride2_shape() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 8, 8, 8]).unwrap();
        let w = Tensor::<f32>::zeros(vec![1, 1, 3, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(vec![1]).unwrap();
        let y = conv3d_forward(&x, &w, &b, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
    }

    #[test]
    fn conv3d_matches_seven_loop_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let x = Tensor::<f32>::randn(vec![1, 2, 5, 5, 5], &mut rng).unwrap();
        let w = Tensor::<f32>::randn(vec![3, 2, 3, 3, 3], &mut rng).unwrap();
        let b = Tensor::<f32>::randn(vec![3], &mut rng).unwrap();
        let (stride, pad) = (1usize, 1usize);
        let y = conv3d_forward(&x, &w, &b, stride, pad, 1).unwrap();
        // independent oracle: direct 7-nested-loop definition
        for f in 0..3 {
            for od in 0..5 {
                for oh in 0..5 {
                    for ow in 0..5 {
                        let mut acc = b.at(&[f]);
                        for c in 0..2 {
                            for kd in 0..3 {
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        let id = od as isize + kd as isize - pad as isize;
                                        let ih = oh as isize + kh as isize - pad as isize;
                                        let iw = ow as isize + kw as isize - pad as isize;
                                        if id >= 0
                                            && id < 5
                                            && ih >= 0
                                            && ih < 5
                                            && iw >= 0
                                            && iw < 5
                                        {
                                            acc += x.at(&[
                                                0, c, id as usize, ih as usize, iw as usize,
                                            ]) * w.at(&[f, c, kd, kh, kw]);
                                        }
                                    }
                                }
                            }
                        }
                        let got = y.at(&[0, f, od, oh, ow]);
                        assert!((acc - got).abs() < 1e-5, "oracle {acc} vs {got}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv3d_kernel_too_large_error() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 2, 2, 2]).unwrap();
        let w = Tensor::<f32>::zeros(vec![1, 1, 3, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(vec![1]).unwrap();
        assert!(matches!(
            conv3d_forward(&x, &w, &b, 1, 0, 1).unwrap_err(),
            Error::KernelTooLarge { .. }
        ));
    }

    #[test]
    fn grouped_conv_equals_independent_convs() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let groups = 4;
        let x = Tensor::<f32>::randn(vec![2, 4 * groups, 4, 4, 4], &mut rng).unwrap();
        let w = Tensor::<f32>::randn(vec![3 * groups, 4, 3, 3, 3], &mut rng).unwrap();
        let b = Tensor::<f32>::randn(vec![3 * groups], &mut rng).unwrap();
        let y = conv3d_forward(&x, &w, &b, 1, 1, groups).unwrap();
        for g in 0..groups {
            // slice group g out of x, w, b and run a plain conv
            let mut xs = Vec::new();
            for n in 0..2 {
                for c in 0..4 {
                    for v in 0..64 {
                        let d = v / 16;
                        let h = (v / 4) % 4;
                        let wi = v % 4;
                        let _ = n;
                        xs.push(x.at(&[n, g * 4 + c, d, h, wi]));
                    }
                }
            }
            let xg = Tensor::from_vec(vec![2, 4, 4, 4, 4], xs).unwrap();
            let mut ws = Vec::new();
            for f in 0..3 {
                let base = (g * 3 + f) * 4 * 27;
                ws.extend_from_slice(&w.data()[base..base + 4 * 27]);
            }
            let wg = Tensor::from_vec(vec![3, 4, 3, 3, 3], ws).unwrap();
            let bg = Tensor::from_vec(vec![3], b.data()[g * 3..(g + 1) * 3].to_vec()).unwrap();
            let yg = conv3d_forward(&xg, &wg, &bg, 1, 1, 1).unwrap();
            for n in 0..2 {
                for f in 0..3 {
                    for v in 0..64 {
                        let d = v / 16;
                        let h = (v / 4) % 4;
                        let wi = v % 4;
                        assert_eq!(yg.at(&[n, f, d, h, wi]), y.at(&[n, g * 3 + f, d, h, wi]));
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::<f32>::full(vec![1, 1, 3, 2, 2], 5.0).unwrap();
        let y = upsample_trilinear2x_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 6, 4, 4]);
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-6));
    }

    #[test]
    fn upsample_1d_profile_monotone_with_endpoints() {
        let x = t(&[1, 1, 2, 1, 1], &[0.0, 1.0]);
        let y = upsample_trilinear2x_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 2, 2]);
        let profile: Vec<f32> = (0..4).map(|d| y.at(&[0, 0, d, 0, 0])).collect();
        assert_eq!(profile[0], 0.0);
        assert_eq!(profile[3], 1.0);
        for i in 1..4 {
            assert!(profile[i] >= profile[i - 1]);
        }
    }

    #[test]
    fn upsample_matches_closed_form_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(21);
        let x = Tensor::<f32>::randn(vec![1, 1, 2, 2, 2], &mut rng).unwrap();
        let y = upsample_trilinear2x_forward(&x).unwrap();
        // independent oracle: direct corner-aligned interpolation formula
        let coord = |o: usize| o as f32 * 1.0 / 3.0; // (in-1)/(out-1) = 1/3
        for od in 0..4 {
            for oh in 0..4 {
                for ow in 0..4 {
                    let (pd, ph, pw) = (coord(od), coord(oh), coord(ow));
                    let (d0, h0, w0) = (pd.floor() as usize, ph.floor() as usize, pw.floor() as usize);
                    let (d1, h1, w1) = ((d0 + 1).min(1), (h0 + 1).min(1), (w0 + 1).min(1));
                    let (fd, fh, fw) = (pd - d0 as f32, ph - h0 as f32, pw - w0 as f32);
                    let mut acc = 0.0f32;
                    for (di, wd_) in [(d0, 1.0 - fd), (d1, fd)] {
                        for (hi, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                            for (wi, ww) in [(w0, 1.0 - fw), (w1, fw)] {
                                acc += x.at(&[0, 0, di, hi, wi]) * wd_ * wh * ww;
                            }
                        }
                    }
                    assert!((acc - y.at(&[0, 0, od, oh, ow])).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn group_norm_constant_input_is_beta() {
        let x = Tensor::<f32>::full(vec![1, 4, 2, 2, 2], 3.0).unwrap();
        let gamma = Tensor::<f32>::ones(vec![4]).unwrap();
        let beta = Tensor::<f32>::zeros(vec![4]).unwrap();
        let y = group_norm_forward(&x, 2, &gamma, &beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let beta7 = Tensor::<f32>::full(vec![4], 7.0).unwrap();
        let y7 = group_norm_forward(&x, 2, &gamma, &beta7, 1e-5).unwrap();
        assert!(y7.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let x = Tensor::<f32>::randn(vec![2, 4, 3, 3, 3], &mut rng).unwrap();
        let gamma = Tensor::<f32>::ones(vec![4]).unwrap();
        let beta = Tensor::<f32>::zeros(vec![4]).unwrap();
        let y = group_norm_forward(&x, 2, &gamma, &beta, 1e-6).unwrap();
        // oracle: direct mean/variance of each (sample, group) block
        for n in 0..2 {
            for g in 0..2 {
                let mut vals = Vec::new();
                for c in 0..2 {
                    for d in 0..3 {
                        for h in 0..3 {
                            for w in 0..3 {
                                vals.push(y.at(&[n, g * 2 + c, d, h, w]));
                            }
                        }
                    }
                }
                let m: f32 = vals.iter().sum::<f32>() / vals.len() as f32;
                let v: f32 =
                    vals.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / vals.len() as f32;
                assert!(m.abs() < 1e-4, "group mean {m}");
                assert!((v - 1.0).abs() < 1e-3, "group var {v}");
            }
        }
    }

    #[test]
    fn group_norm_bad_group_count() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 2, 2, 2]).unwrap();
        let gamma = Tensor::<f32>::ones(vec![3]).unwrap();
        let beta = Tensor::<f32>::zeros(vec![3]).unwrap();
        assert!(matches!(
            group_norm_forward(&x, 2, &gamma, &beta, 1e-5).unwrap_err(),
            Error::BadGroupCount { .. }
        ));
    }

    #[test]
    fn default_group_count_rule() {
        assert_eq!(default_group_count(16), 8);
        assert_eq!(default_group_count(8), 8);
        assert_eq!(default_group_count(4), 4);
        assert_eq!(default_group_count(12), 1); // 12 % 8 != 0 -> fallback
        assert_eq!(default_group_count(1), 1);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let y = softmax_forward(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_forward(&t(&[2], &[1000.0, 0.0]), 0).unwrap();
        assert!(y.is_finite());
        assert!(y.data()[0] > 0.999 && y.data()[1] < 1e-3);
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        let y = softmax_forward(&t(&[3], &[1.0, 2.0, 3.0]), 0).unwrap();
        let exps: Vec<f32> = [1.0f32, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f32 = exps.iter().sum();
        for i in 0..3 {
            assert!((y.data()[i] - exps[i] / s).abs() < 1e-6);
        }
    }

    #[test]
    fn reduce_sum_and_max_and_mean() {
        let r = reduce_forward(ReduceOp::Sum, &t(&[3], &[1.0, 2.0, 3.0]), &[0], false).unwrap();
        assert_eq!(r.out.data(), &[6.0]);

        let mut vol = Tensor::<f32>::zeros(vec![1, 2, 2, 2]).unwrap();
        vol.set(&[0, 1, 0, 1], 9.0);
        let r = reduce_forward(ReduceOp::Max, &vol, &[1, 2, 3], false).unwrap();
        assert_eq!(r.out.data(), &[9.0]);

        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn(vec![2, 3], &mut rng).unwrap();
        let r = reduce_forward(ReduceOp::Mean, &x, &[1], false).unwrap();
        for i in 0..2 {
            let manual = (x.at(&[i, 0]) + x.at(&[i, 1]) + x.at(&[i, 2])) / 3.0;
            assert!((manual - r.out.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn reduce_invalid_axis() {
        let err =
            reduce_forward(ReduceOp::Sum, &t(&[3], &[1.0, 2.0, 3.0]), &[1], false).unwrap_err();
        assert!(matches!(err, Error::InvalidAxis { .. }));
    }

    #[test]
    fn concat_basic_and_roundtrip() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[1, 3], &[3.0, 4.0, 5.0]);
        let y = concat_forward(&[&a, &b], 1).unwrap();
        assert_eq!(y.shape(), &[1, 5]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);

        let single = concat_forward(&[&a], 1).unwrap();
        assert_eq!(single, a);

        // slicing the output recovers each input (via concat_backward as slicer)
        let parts = concat_backward(&[vec![1, 2], vec![1, 3]], 1, &y);
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
    }

    #[test]
    fn concat_incompatible_shapes() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(concat_forward(&[&a, &b], 1).is_err());
    }

    #[test]
    fn expand_and_backward_sum() {
        let x = t(&[2, 1], &[1.0, 2.0]);
        let y = expand_forward(&x, &[2, 3]).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let dy = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let dx = expand_backward(&[2, 1], &dy);
        assert_eq!(dx.data(), &[6.0, 15.0]);
    }

    #[test]
    fn index_axis0_selects_subtensor() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = index_axis0_forward(&x, 1).unwrap();
        assert_eq!(y.shape(), &[3]);
        assert_eq!(y.data(), &[4.0, 5.0, 6.0]);
        let dx = index_axis0_backward(&[2, 3], 1, &t(&[3], &[1.0, 1.0, 1.0]));
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}

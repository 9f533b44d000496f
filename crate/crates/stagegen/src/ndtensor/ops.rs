//! Forward ops and their reverse-mode rules.
//!
//! Convolutions use two shared kernels: a gather form (im2col + per-output
//! accumulation) and a scatter form (per-input broadcast into the output).
//! `conv2d` forward is the gather form; `conv_transpose2d` forward is the
//! scatter form; each one's input-gradient is the other with channel roles
//! swapped, which is how the adjoint identity
//! `⟨conv2d(x,w), y⟩ = ⟨x, conv_transpose2d(y,w)⟩` falls out structurally.
//!
//! Loop order is fixed everywhere (row-major, no parallel reduction inside an
//! op), so forward outputs are bitwise reproducible within one build.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tensor::{Real, Tensor};

/// Normalization phase: training recomputes batch statistics, eval replays
/// stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

fn expect_rank4<'a, T: Real>(op: &'static str, name: &str, t: &'a Tensor<T>) -> Result<&'a [usize]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            op,
            format!("{name} must be rank 4 (NCHW), got shape {s:?}"),
        ));
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Convolution kernels
// ---------------------------------------------------------------------------

/// Output spatial extent of a strided convolution.
pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Gather-form convolution.
///
/// `x`: `[n][cin][h][w]`, `wt`: `[cout][cin][kh][kw]`, output
/// `[n][cout][out_h][out_w]` with `out[.., oh, ow]` sampling
/// `x[.., oh·s − p + kh, ow·s − p + kw]` (zero outside bounds).
#[allow(clippy::too_many_arguments)]
fn gather_conv<T: Real>(
    x: &[T],
    (n, cin, h, w): (usize, usize, usize, usize),
    wt: &[T],
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (out_h, out_w): (usize, usize),
    bias: Option<&[T]>,
) -> Vec<T> {
    let k_len = cin * kh * kw;
    let p_len = out_h * out_w;
    let mut out = vec![T::zero(); n * cout * p_len];
    let mut col = vec![T::zero(); k_len * p_len];
    for ni in 0..n {
        // im2col for this sample
        for ci in 0..cin {
            let x_chan = &x[(ni * cin + ci) * h * w..][..h * w];
            for khi in 0..kh {
                for kwi in 0..kw {
                    let col_row = &mut col[((ci * kh + khi) * kw + kwi) * p_len..][..p_len];
                    for oh in 0..out_h {
                        let ih = (oh * stride + khi) as isize - pad as isize;
                        let dst = &mut col_row[oh * out_w..][..out_w];
                        if ih < 0 || ih >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src_row = &x_chan[ih as usize * w..][..w];
                        for ow in 0..out_w {
                            let iw = (ow * stride + kwi) as isize - pad as isize;
                            dst[ow] = if iw < 0 || iw >= w as isize {
                                T::zero()
                            } else {
                                src_row[iw as usize]
                            };
                        }
                    }
                }
            }
        }
        for co in 0..cout {
            let out_row = &mut out[(ni * cout + co) * p_len..][..p_len];
            if let Some(b) = bias {
                out_row.fill(b[co]);
            }
            let w_row = &wt[co * k_len..][..k_len];
            for (ki, &wv) in w_row.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                let col_row = &col[ki * p_len..][..p_len];
                for (o, &c) in out_row.iter_mut().zip(col_row) {
                    *o += wv * c;
                }
            }
        }
    }
    out
}

/// Weight gradient of the gather-form convolution:
/// `dw[co][ci][kh][kw] = Σ_{n,oh,ow} dy[n,co,oh,ow]·x[n,ci,oh·s−p+kh,ow·s−p+kw]`.
#[allow(clippy::too_many_arguments)]
fn gather_conv_dweight<T: Real>(
    x: &[T],
    (n, cin, h, w): (usize, usize, usize, usize),
    dy: &[T],
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (out_h, out_w): (usize, usize),
) -> Vec<T> {
    let k_len = cin * kh * kw;
    let p_len = out_h * out_w;
    let mut dw = vec![T::zero(); cout * k_len];
    for ni in 0..n {
        for ci in 0..cin {
            let x_chan = &x[(ni * cin + ci) * h * w..][..h * w];
            for khi in 0..kh {
                for kwi in 0..kw {
                    // Accumulate the dot of each dy channel row with this
                    // gathered input row.
                    for co in 0..cout {
                        let dy_row = &dy[(ni * cout + co) * p_len..][..p_len];
                        let mut acc = T::zero();
                        for oh in 0..out_h {
                            let ih = (oh * stride + khi) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src_row = &x_chan[ih as usize * w..][..w];
                            let dy_seg = &dy_row[oh * out_w..][..out_w];
                            for ow in 0..out_w {
                                let iw = (ow * stride + kwi) as isize - pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    acc += dy_seg[ow] * src_row[iw as usize];
                                }
                            }
                        }
                        dw[(co * cin + ci) * kh * kw + khi * kw + kwi] += acc;
                    }
                }
            }
        }
    }
    dw
}

/// Scatter-form (fractionally-strided) convolution.
///
/// `x`: `[n][cin][h][w]`, `wt`: `[cin][cout][kh][kw]`, output
/// `[n][cout][out_h][out_w]`; every input tap broadcasts into the window
/// anchored at `ih·s − p` (writes outside bounds are dropped).
#[allow(clippy::too_many_arguments)]
fn scatter_conv<T: Real>(
    x: &[T],
    (n, cin, h, w): (usize, usize, usize, usize),
    wt: &[T],
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (out_h, out_w): (usize, usize),
    bias: Option<&[T]>,
) -> Vec<T> {
    let p_len = out_h * out_w;
    let mut out = vec![T::zero(); n * cout * p_len];
    if let Some(b) = bias {
        for ni in 0..n {
            for co in 0..cout {
                out[(ni * cout + co) * p_len..][..p_len].fill(b[co]);
            }
        }
    }
    for ni in 0..n {
        for ci in 0..cin {
            let x_chan = &x[(ni * cin + ci) * h * w..][..h * w];
            for ih in 0..h {
                let oh_base = (ih * stride) as isize - pad as isize;
                for iw in 0..w {
                    let xv = x_chan[ih * w + iw];
                    let ow_base = (iw * stride) as isize - pad as isize;
                    for co in 0..cout {
                        let out_chan = &mut out[(ni * cout + co) * p_len..][..p_len];
                        let w_win = &wt[((ci * cout + co) * kh) * kw..][..kh * kw];
                        for khi in 0..kh {
                            let oh = oh_base + khi as isize;
                            if oh < 0 || oh >= out_h as isize {
                                continue;
                            }
                            let out_row = &mut out_chan[oh as usize * out_w..][..out_w];
                            let w_row = &w_win[khi * kw..][..kw];
                            for kwi in 0..kw {
                                let ow = ow_base + kwi as isize;
                                if ow >= 0 && ow < out_w as isize {
                                    out_row[ow as usize] += xv * w_row[kwi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Weight gradient of the scatter-form convolution:
/// `dw[ci][co][kh][kw] = Σ_{n,ih,iw} x[n,ci,ih,iw]·dy[n,co,ih·s−p+kh,iw·s−p+kw]`.
#[allow(clippy::too_many_arguments)]
fn scatter_conv_dweight<T: Real>(
    x: &[T],
    (n, cin, h, w): (usize, usize, usize, usize),
    dy: &[T],
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (out_h, out_w): (usize, usize),
) -> Vec<T> {
    let p_len = out_h * out_w;
    let mut dw = vec![T::zero(); cin * cout * kh * kw];
    for ni in 0..n {
        for ci in 0..cin {
            let x_chan = &x[(ni * cin + ci) * h * w..][..h * w];
            for ih in 0..h {
                let oh_base = (ih * stride) as isize - pad as isize;
                for iw in 0..w {
                    let xv = x_chan[ih * w + iw];
                    if xv == T::zero() {
                        continue;
                    }
                    let ow_base = (iw * stride) as isize - pad as isize;
                    for co in 0..cout {
                        let dy_chan = &dy[(ni * cout + co) * p_len..][..p_len];
                        let dw_win = &mut dw[((ci * cout + co) * kh) * kw..][..kh * kw];
                        for khi in 0..kh {
                            let oh = oh_base + khi as isize;
                            if oh < 0 || oh >= out_h as isize {
                                continue;
                            }
                            let dy_row = &dy_chan[oh as usize * out_w..][..out_w];
                            let dw_row = &mut dw_win[khi * kw..][..kw];
                            for kwi in 0..kw {
                                let ow = ow_base + kwi as isize;
                                if ow >= 0 && ow < out_w as isize {
                                    dw_row[kwi] += xv * dy_row[ow as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

fn bias_grad<T: Real>(dy: &[T], n: usize, cout: usize, p_len: usize) -> Vec<T> {
    let mut db = vec![T::zero(); cout];
    for ni in 0..n {
        for co in 0..cout {
            let row = &dy[(ni * cout + co) * p_len..][..p_len];
            db[co] += row.iter().copied().sum();
        }
    }
    db
}

// ---------------------------------------------------------------------------
// Convolution ops
// ---------------------------------------------------------------------------

/// 2-D convolution. `input` is `N×I×H×W`, `weight` is `O×I×Kh×Kw`.
///
/// Output spatial extent is `(H + 2·pad − Kh)/stride + 1` (floored).
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let xs = expect_rank4(OP, "input", input)?;
    let ws = expect_rank4(OP, "weight", weight)?;
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if cin != wcin {
        return Err(Error::shape(
            OP,
            format!("input channels ({cin}) != weight in-channels ({wcin})"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be >= 1"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                OP,
                format!("bias length {:?} != out-channels ({cout})", b.shape()),
            ));
        }
    }
    let out_h = conv_out_extent(h, kh, stride, padding)
        .ok_or_else(|| Error::shape(OP, format!("kernel height {kh} exceeds padded input {h}+2·{padding}")))?;
    let out_w = conv_out_extent(w, kw, stride, padding)
        .ok_or_else(|| Error::shape(OP, format!("kernel width {kw} exceeds padded input {w}+2·{padding}")))?;

    let out = {
        let x = input.data();
        let wt = weight.data();
        let b = bias.map(|b| b.to_vec());
        gather_conv(
            &x,
            (n, cin, h, w),
            &wt,
            (cout, kh, kw),
            stride,
            padding,
            (out_h, out_w),
            b.as_deref(),
        )
    };

    let x_t = input.clone();
    let w_t = weight.clone();
    let b_t = bias.cloned();
    let mut parents = vec![x_t.clone(), w_t.clone()];
    if let Some(b) = &b_t {
        parents.push(b.clone());
    }
    let backward = move |dy: &[T]| {
        if x_t.requires_grad() {
            // Input gradient: scatter dy back through the same taps. The
            // weight buffer O×I×Kh×Kw reads directly as the scatter kernel's
            // [cin=O][cout=I] layout.
            let wt = w_t.data();
            let dx = scatter_conv(
                dy,
                (n, cout, out_h, out_w),
                &wt,
                (cin, kh, kw),
                stride,
                padding,
                (h, w),
                None,
            );
            x_t.accumulate_grad(&dx);
        }
        if w_t.requires_grad() {
            let x = x_t.data();
            let dw = gather_conv_dweight(
                &x,
                (n, cin, h, w),
                dy,
                (cout, kh, kw),
                stride,
                padding,
                (out_h, out_w),
            );
            w_t.accumulate_grad(&dw);
        }
        if let Some(b) = &b_t {
            if b.requires_grad() {
                b.accumulate_grad(&bias_grad(dy, n, cout, out_h * out_w));
            }
        }
    };
    Ok(Tensor::from_op(
        vec![n, cout, out_h, out_w],
        out,
        parents,
        Box::new(backward),
    ))
}

/// Transposed 2-D convolution (the adjoint of [`conv2d`] with the same
/// stride/padding). `input` is `N×I×H×W`, `weight` is `I×O×Kh×Kw`.
///
/// Output spatial extent is `(H − 1)·stride − 2·pad + Kh`.
pub fn conv_transpose2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv_transpose2d";
    let xs = expect_rank4(OP, "input", input)?;
    let ws = expect_rank4(OP, "weight", weight)?;
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (wcin, cout, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if cin != wcin {
        return Err(Error::shape(
            OP,
            format!("input channels ({cin}) != weight in-channels ({wcin})"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be >= 1"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                OP,
                format!("bias length {:?} != out-channels ({cout})", b.shape()),
            ));
        }
    }
    let grown = (h - 1) * stride + kh;
    let out_h = grown
        .checked_sub(2 * padding)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::shape(OP, format!("padding {padding} consumes the whole {grown}-high output")))?;
    let grown_w = (w - 1) * stride + kw;
    let out_w = grown_w
        .checked_sub(2 * padding)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::shape(OP, format!("padding {padding} consumes the whole {grown_w}-wide output")))?;

    let out = {
        let x = input.data();
        let wt = weight.data();
        let b = bias.map(|b| b.to_vec());
        scatter_conv(
            &x,
            (n, cin, h, w),
            &wt,
            (cout, kh, kw),
            stride,
            padding,
            (out_h, out_w),
            b.as_deref(),
        )
    };

    let x_t = input.clone();
    let w_t = weight.clone();
    let b_t = bias.cloned();
    let mut parents = vec![x_t.clone(), w_t.clone()];
    if let Some(b) = &b_t {
        parents.push(b.clone());
    }
    let backward = move |dy: &[T]| {
        if x_t.requires_grad() {
            // Input gradient gathers dy over each input tap's window; the
            // I×O×Kh×Kw buffer reads directly as the gather kernel's
            // [cout=I][cin=O] layout.
            let wt = w_t.data();
            let dx = gather_conv(
                dy,
                (n, cout, out_h, out_w),
                &wt,
                (cin, kh, kw),
                stride,
                padding,
                (h, w),
                None,
            );
            x_t.accumulate_grad(&dx);
        }
        if w_t.requires_grad() {
            let x = x_t.data();
            let dw = scatter_conv_dweight(
                &x,
                (n, cin, h, w),
                dy,
                (cout, kh, kw),
                stride,
                padding,
                (out_h, out_w),
            );
            w_t.accumulate_grad(&dw);
        }
        if let Some(b) = &b_t {
            if b.requires_grad() {
                b.accumulate_grad(&bias_grad(dy, n, cout, out_h * out_w));
            }
        }
    };
    Ok(Tensor::from_op(
        vec![n, cout, out_h, out_w],
        out,
        parents,
        Box::new(backward),
    ))
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

fn check_norm_params<T: Real>(
    op: &'static str,
    channels: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<()> {
    if gamma.shape() != [channels] {
        return Err(Error::shape(
            op,
            format!("gamma shape {:?} != channels ({channels})", gamma.shape()),
        ));
    }
    if beta.shape() != [channels] {
        return Err(Error::shape(
            op,
            format!("beta shape {:?} != channels ({channels})", beta.shape()),
        ));
    }
    Ok(())
}

/// Batch normalization over `N×H×W` per channel.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running buffers with `momentum`; eval mode replays the running buffers.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Rc<RefCell<Vec<T>>>,
    running_var: &Rc<RefCell<Vec<T>>>,
    momentum: f64,
    eps: f64,
    mode: NormMode,
) -> Result<Tensor<T>> {
    const OP: &str = "batch_norm2d";
    let xs = expect_rank4(OP, "input", input)?;
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if n == 0 {
        return Err(Error::invalid(OP, "batch size must be >= 1"));
    }
    check_norm_params(OP, c, gamma, beta)?;
    if running_mean.borrow().len() != c || running_var.borrow().len() != c {
        return Err(Error::shape(OP, format!("running stats length != channels ({c})")));
    }
    let eps_t = T::of(eps);
    let m = n * h * w;
    let m_t = T::of(m as f64);

    let x = input.to_vec();
    let g = gamma.to_vec();
    let b = beta.to_vec();
    let hw = h * w;

    let (mean, inv): (Vec<T>, Vec<T>) = match mode {
        NormMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut sum = T::zero();
                for ni in 0..n {
                    let row = &x[(ni * c + ci) * hw..][..hw];
                    sum += row.iter().copied().sum();
                }
                mean[ci] = sum / m_t;
            }
            for ci in 0..c {
                let mu = mean[ci];
                let mut sum = T::zero();
                for ni in 0..n {
                    let row = &x[(ni * c + ci) * hw..][..hw];
                    for &v in row {
                        let d = v - mu;
                        sum += d * d;
                    }
                }
                var[ci] = sum / m_t;
            }
            {
                let mom = T::of(momentum);
                let keep = T::one() - mom;
                let mut rm = running_mean.borrow_mut();
                let mut rv = running_var.borrow_mut();
                for ci in 0..c {
                    rm[ci] = keep * rm[ci] + mom * mean[ci];
                    rv[ci] = keep * rv[ci] + mom * var[ci];
                }
            }
            let inv = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            (mean, inv)
        }
        NormMode::Eval => {
            let rm = running_mean.borrow().clone();
            let rv = running_var.borrow();
            let inv = rv.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            (rm, inv)
        }
    };

    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for j in 0..hw {
                let xh = (x[base + j] - mean[ci]) * inv[ci];
                xhat[base + j] = xh;
                out[base + j] = g[ci] * xh + b[ci];
            }
        }
    }

    let x_t = input.clone();
    let g_t = gamma.clone();
    let b_t = beta.clone();
    let parents = vec![x_t.clone(), g_t.clone(), b_t.clone()];
    let backward = move |dy: &[T]| {
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for j in 0..hw {
                    dgamma[ci] += dy[base + j] * xhat[base + j];
                    dbeta[ci] += dy[base + j];
                }
            }
        }
        if x_t.requires_grad() {
            let mut dx = vec![T::zero(); dy.len()];
            match mode {
                NormMode::Train => {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let scale = g[ci] * inv[ci] / m_t;
                            for j in 0..hw {
                                dx[base + j] = scale
                                    * (m_t * dy[base + j]
                                        - dbeta[ci]
                                        - xhat[base + j] * dgamma[ci]);
                            }
                        }
                    }
                }
                NormMode::Eval => {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let scale = g[ci] * inv[ci];
                            for j in 0..hw {
                                dx[base + j] = scale * dy[base + j];
                            }
                        }
                    }
                }
            }
            x_t.accumulate_grad(&dx);
        }
        if g_t.requires_grad() {
            g_t.accumulate_grad(&dgamma);
        }
        if b_t.requires_grad() {
            b_t.accumulate_grad(&dbeta);
        }
    };
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        parents,
        Box::new(backward),
    ))
}

/// Instance normalization: statistics per `(sample, channel)` over `H×W`,
/// no running stats.
pub fn instance_norm2d<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    const OP: &str = "instance_norm2d";
    let xs = expect_rank4(OP, "input", input)?;
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if n == 0 {
        return Err(Error::invalid(OP, "batch size must be >= 1"));
    }
    check_norm_params(OP, c, gamma, beta)?;
    let eps_t = T::of(eps);
    let hw = h * w;
    let m_t = T::of(hw as f64);

    let x = input.to_vec();
    let g = gamma.to_vec();
    let b = beta.to_vec();

    let groups = n * c;
    let mut inv = vec![T::zero(); groups];
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for gi in 0..groups {
        let base = gi * hw;
        let row = &x[base..base + hw];
        let mu = row.iter().copied().sum::<T>() / m_t;
        let mut var = T::zero();
        for &v in row {
            let d = v - mu;
            var += d * d;
        }
        var /= m_t;
        let iv = T::one() / (var + eps_t).sqrt();
        inv[gi] = iv;
        let ci = gi % c;
        for j in 0..hw {
            let xh = (row[j] - mu) * iv;
            xhat[base + j] = xh;
            out[base + j] = g[ci] * xh + b[ci];
        }
    }

    let x_t = input.clone();
    let g_t = gamma.clone();
    let b_t = beta.clone();
    let parents = vec![x_t.clone(), g_t.clone(), b_t.clone()];
    let backward = move |dy: &[T]| {
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = if x_t.requires_grad() {
            vec![T::zero(); dy.len()]
        } else {
            Vec::new()
        };
        for gi in 0..groups {
            let base = gi * hw;
            let ci = gi % c;
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for j in 0..hw {
                sum_dy += dy[base + j];
                sum_dy_xhat += dy[base + j] * xhat[base + j];
            }
            dbeta[ci] += sum_dy;
            dgamma[ci] += sum_dy_xhat;
            if !dx.is_empty() {
                let scale = g[ci] * inv[gi] / m_t;
                for j in 0..hw {
                    dx[base + j] =
                        scale * (m_t * dy[base + j] - sum_dy - xhat[base + j] * sum_dy_xhat);
                }
            }
        }
        if x_t.requires_grad() {
            x_t.accumulate_grad(&dx);
        }
        if g_t.requires_grad() {
            g_t.accumulate_grad(&dgamma);
        }
        if b_t.requires_grad() {
            b_t.accumulate_grad(&dbeta);
        }
    };
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        parents,
        Box::new(backward),
    ))
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

fn unary<T: Real>(
    input: &Tensor<T>,
    forward: impl Fn(T) -> T,
    // Receives (input value, output value) and returns the local derivative.
    derivative: impl Fn(T, T) -> T + 'static,
) -> Tensor<T> {
    let x = input.to_vec();
    let y: Vec<T> = x.iter().map(|&v| forward(v)).collect();
    let y_saved = y.clone();
    let x_t = input.clone();
    let parents = vec![x_t.clone()];
    let backward = move |dy: &[T]| {
        if x_t.requires_grad() {
            let dx: Vec<T> = dy
                .iter()
                .zip(x.iter().zip(&y_saved))
                .map(|(&g, (&xi, &yi))| g * derivative(xi, yi))
                .collect();
            x_t.accumulate_grad(&dx);
        }
    };
    Tensor::from_op(
        input.shape().to_vec(),
        y,
        parents,
        Box::new(backward),
    )
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    unary(
        input,
        |v| if v > T::zero() { v } else { T::zero() },
        |x, _| if x > T::zero() { T::one() } else { T::zero() },
    )
}

pub fn leaky_relu<T: Real>(input: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    unary(
        input,
        move |v| if v > T::zero() { v } else { s * v },
        move |x, _| if x > T::zero() { T::one() } else { s },
    )
}

pub fn tanh<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    unary(input, |v| v.tanh(), |_, y| T::one() - y * y)
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    unary(
        input,
        |v| T::one() / (T::one() + (-v).exp()),
        |_, y| y * (T::one() - y),
    )
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("lhs {:?} != rhs {:?}", a.shape(), b.shape()),
        ));
    }
    let out: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    let a_t = a.clone();
    let b_t = b.clone();
    let parents = vec![a_t.clone(), b_t.clone()];
    let backward = move |dy: &[T]| {
        a_t.accumulate_grad(dy);
        b_t.accumulate_grad(dy);
    };
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        parents,
        Box::new(backward),
    ))
}

/// Multiply by a compile-time constant scalar.
pub fn mul_scalar<T: Real>(input: &Tensor<T>, k: f64) -> Tensor<T> {
    let kt = T::of(k);
    unary(input, move |v| v * kt, move |_, _| kt)
}

/// Reinterpret the buffer under a new shape of equal element count.
pub fn reshape<T: Real>(input: &Tensor<T>, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
    let shape = shape.into();
    let count: usize = shape.iter().product();
    if count != input.len() {
        return Err(Error::shape(
            "reshape",
            format!("cannot view {:?} as {:?}", input.shape(), shape),
        ));
    }
    let x_t = input.clone();
    let parents = vec![x_t.clone()];
    let backward = move |dy: &[T]| {
        x_t.accumulate_grad(dy);
    };
    Ok(Tensor::from_op(
        shape,
        input.to_vec(),
        parents,
        Box::new(backward),
    ))
}

/// Concatenate two NCHW tensors along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let sa = expect_rank4(OP, "lhs", a)?;
    let sb = expect_rank4(OP, "rhs", b)?;
    if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(Error::shape(
            OP,
            format!("non-channel dims differ: {sa:?} vs {sb:?}"),
        ));
    }
    let (n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
    let hw = h * w;
    let mut out = vec![T::zero(); n * (ca + cb) * hw];
    {
        let da = a.data();
        let db = b.data();
        for ni in 0..n {
            let dst = &mut out[ni * (ca + cb) * hw..][..(ca + cb) * hw];
            dst[..ca * hw].copy_from_slice(&da[ni * ca * hw..][..ca * hw]);
            dst[ca * hw..].copy_from_slice(&db[ni * cb * hw..][..cb * hw]);
        }
    }
    let a_t = a.clone();
    let b_t = b.clone();
    let parents = vec![a_t.clone(), b_t.clone()];
    let backward = move |dy: &[T]| {
        if a_t.requires_grad() {
            let mut da = vec![T::zero(); n * ca * hw];
            for ni in 0..n {
                da[ni * ca * hw..][..ca * hw]
                    .copy_from_slice(&dy[ni * (ca + cb) * hw..][..ca * hw]);
            }
            a_t.accumulate_grad(&da);
        }
        if b_t.requires_grad() {
            let mut db = vec![T::zero(); n * cb * hw];
            for ni in 0..n {
                db[ni * cb * hw..][..cb * hw]
                    .copy_from_slice(&dy[(ni * (ca + cb) + ca) * hw..][..cb * hw]);
            }
            b_t.accumulate_grad(&db);
        }
    };
    Ok(Tensor::from_op(
        vec![n, ca + cb, h, w],
        out,
        parents,
        Box::new(backward),
    ))
}

/// Reflection padding (no edge repeat): `out` is `H+2p × W+2p`.
/// Requires `p <= H−1` and `p <= W−1`.
pub fn reflect_pad2d<T: Real>(input: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    const OP: &str = "reflect_pad2d";
    let xs = expect_rank4(OP, "input", input)?;
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if pad == 0 {
        return reshape(input, xs.to_vec());
    }
    if pad >= h || pad >= w {
        return Err(Error::invalid(
            OP,
            format!("pad {pad} must be smaller than spatial dims {h}x{w}"),
        ));
    }
    let oh = h + 2 * pad;
    let ow = w + 2 * pad;
    let reflect = |i: isize, extent: usize| -> usize {
        let last = extent as isize - 1;
        let v = if i < 0 { -i } else if i > last { 2 * last - i } else { i };
        v as usize
    };
    let mut out = vec![T::zero(); n * c * oh * ow];
    // Indices are identical for every (n, c) plane; precompute the map once.
    let mut src_index = vec![0usize; oh * ow];
    for y in 0..oh {
        let sy = reflect(y as isize - pad as isize, h);
        for x in 0..ow {
            let sx = reflect(x as isize - pad as isize, w);
            src_index[y * ow + x] = sy * w + sx;
        }
    }
    {
        let xd = input.data();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..][..h * w];
            let dst = &mut out[plane * oh * ow..][..oh * ow];
            for (d, &si) in dst.iter_mut().zip(&src_index) {
                *d = src[si];
            }
        }
    }
    let x_t = input.clone();
    let parents = vec![x_t.clone()];
    let backward = move |dy: &[T]| {
        if x_t.requires_grad() {
            let mut dx = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                let src = &mut dx[plane * h * w..][..h * w];
                let up = &dy[plane * oh * ow..][..oh * ow];
                for (g, &si) in up.iter().zip(&src_index) {
                    src[si] += *g;
                }
            }
            x_t.accumulate_grad(&dx);
        }
    };
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        parents,
        Box::new(backward),
    ))
}

/// Add a per-(sample, channel) value to every spatial position:
/// `N×C×H×W + N×C×1×1`.
pub fn broadcast_add_channels<T: Real>(input: &Tensor<T>, per_channel: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "broadcast_add_channels";
    let xs = expect_rank4(OP, "input", input)?;
    let bs = expect_rank4(OP, "per_channel", per_channel)?;
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if bs != [n, c, 1, 1] {
        return Err(Error::shape(
            OP,
            format!("per_channel shape {bs:?} != [{n}, {c}, 1, 1]"),
        ));
    }
    let hw = h * w;
    let mut out = input.to_vec();
    {
        let b = per_channel.data();
        for gi in 0..n * c {
            let bv = b[gi];
            for v in &mut out[gi * hw..(gi + 1) * hw] {
                *v += bv;
            }
        }
    }
    let x_t = input.clone();
    let b_t = per_channel.clone();
    let parents = vec![x_t.clone(), b_t.clone()];
    let backward = move |dy: &[T]| {
        x_t.accumulate_grad(dy);
        if b_t.requires_grad() {
            let mut db = vec![T::zero(); n * c];
            for gi in 0..n * c {
                db[gi] = dy[gi * hw..(gi + 1) * hw].iter().copied().sum();
            }
            b_t.accumulate_grad(&db);
        }
    };
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        parents,
        Box::new(backward),
    ))
}

/// Inverted dropout: keeps each element with probability `1−rate` and scales
/// survivors by `1/(1−rate)`. Draws the mask from `rng`; callers skip the op
/// entirely in eval mode.
pub fn dropout<T: Real>(input: &Tensor<T>, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    const OP: &str = "dropout";
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(OP, format!("rate {rate} outside [0, 1)")));
    }
    let keep_scale = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let out: Vec<T> = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    let x_t = input.clone();
    let parents = vec![x_t.clone()];
    let backward = move |dy: &[T]| {
        if x_t.requires_grad() {
            let dx: Vec<T> = dy.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
            x_t.accumulate_grad(&dx);
        }
    };
    Ok(Tensor::from_op(
        input.shape().to_vec(),
        out,
        parents,
        Box::new(backward),
    ))
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn softplus<T: Real>(z: T) -> T {
    // max(z, 0) + ln(1 + exp(−|z|)) — stable at both extremes
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over raw logits with targets in `[0, 1]`:
/// `mean(softplus(z) − t·z)`. Gradient w.r.t. logits is `(σ(z) − t)/n`.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "bce_with_logits";
    if logits.shape() != targets.shape() {
        return Err(Error::shape(
            OP,
            format!("logits {:?} != targets {:?}", logits.shape(), targets.shape()),
        ));
    }
    if logits.is_empty() {
        return Err(Error::invalid(OP, "empty input"));
    }
    let t = targets.to_vec();
    if let Some(bad) = t.iter().find(|&&v| v < T::zero() || v > T::one()) {
        return Err(Error::invalid(OP, format!("target {bad} outside [0, 1]")));
    }
    let z = logits.to_vec();
    let n = z.len();
    let n_t = T::of(n as f64);
    let total: T = z
        .iter()
        .zip(&t)
        .map(|(&zi, &ti)| softplus(zi) - ti * zi)
        .sum();
    let loss = total / n_t;
    let x_t = logits.clone();
    let parents = vec![x_t.clone()];
    let backward = move |dy: &[T]| {
        if x_t.requires_grad() {
            let g0 = dy[0] / n_t;
            let dx: Vec<T> = z
                .iter()
                .zip(&t)
                .map(|(&zi, &ti)| {
                    let sig = T::one() / (T::one() + (-zi).exp());
                    g0 * (sig - ti)
                })
                .collect();
            x_t.accumulate_grad(&dx);
        }
    };
    Ok(Tensor::from_op(vec![1], vec![loss], parents, Box::new(backward)))
}

/// Mean absolute difference. The subgradient at exact ties is 0.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "l1_loss";
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            OP,
            format!("pred {:?} != target {:?}", pred.shape(), target.shape()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::invalid(OP, "empty input"));
    }
    let p = pred.to_vec();
    let t = target.to_vec();
    let n_t = T::of(p.len() as f64);
    let total: T = p.iter().zip(&t).map(|(&a, &b)| (a - b).abs()).sum();
    let loss = total / n_t;
    let p_t = pred.clone();
    let t_t = target.clone();
    let parents = vec![p_t.clone(), t_t.clone()];
    let backward = move |dy: &[T]| {
        let g0 = dy[0] / n_t;
        let signs: Vec<T> = p
            .iter()
            .zip(&t)
            .map(|(&a, &b)| {
                if a > b {
                    g0
                } else if a < b {
                    -g0
                } else {
                    T::zero()
                }
            })
            .collect();
        if p_t.requires_grad() {
            p_t.accumulate_grad(&signs);
        }
        if t_t.requires_grad() {
            let neg: Vec<T> = signs.iter().map(|&s| -s).collect();
            t_t.accumulate_grad(&neg);
        }
    };
    Ok(Tensor::from_op(vec![1], vec![loss], parents, Box::new(backward)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::ndtensor::{grad_check, Tensor};
    use crate::testutil::{assert_close, max_abs_diff, randn_param, randn_tensor, randn_vec, sign_target};

    // -- independent oracles ------------------------------------------------

    /// Direct six-nested-loop convolution; the reference every fast path is
    /// checked against.
    #[allow(clippy::too_many_arguments)]
    fn conv2d_oracle<T: Real>(
        x: &[T],
        (n, cin, h, w): (usize, usize, usize, usize),
        wt: &[T],
        (cout, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> (Vec<T>, (usize, usize)) {
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![T::zero(); n * cout * out_h * out_w];
        for ni in 0..n {
            for co in 0..cout {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let mut acc = T::zero();
                        for ci in 0..cin {
                            for khi in 0..kh {
                                for kwi in 0..kw {
                                    let ih = (oh * stride + khi) as isize - pad as isize;
                                    let iw = (ow * stride + kwi) as isize - pad as isize;
                                    if ih >= 0 && ih < h as isize && iw >= 0 && iw < w as isize {
                                        let xv = x[((ni * cin + ci) * h + ih as usize) * w
                                            + iw as usize];
                                        let wv = wt[((co * cin + ci) * kh + khi) * kw + kwi];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[((ni * cout + co) * out_h + oh) * out_w + ow] = acc;
                    }
                }
            }
        }
        (out, (out_h, out_w))
    }

    /// Transposed convolution via zero insertion: stuff the input with
    /// `stride−1` zeros, flip the kernel spatially, swap its channel roles,
    /// then run the plain convolution oracle with stride 1 and pad `K−1−p`.
    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d_oracle<T: Real>(
        x: &[T],
        (n, cin, h, w): (usize, usize, usize, usize),
        wt: &[T], // layout [cin][cout][kh][kw]
        (cout, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<T> {
        let sh = (h - 1) * stride + 1;
        let sw = (w - 1) * stride + 1;
        let mut stuffed = vec![T::zero(); n * cin * sh * sw];
        for ni in 0..n {
            for ci in 0..cin {
                for ih in 0..h {
                    for iw in 0..w {
                        stuffed[((ni * cin + ci) * sh + ih * stride) * sw + iw * stride] =
                            x[((ni * cin + ci) * h + ih) * w + iw];
                    }
                }
            }
        }
        let mut flipped = vec![T::zero(); cout * cin * kh * kw];
        for ci in 0..cin {
            for co in 0..cout {
                for khi in 0..kh {
                    for kwi in 0..kw {
                        flipped[((co * cin + ci) * kh + (kh - 1 - khi)) * kw + (kw - 1 - kwi)] =
                            wt[((ci * cout + co) * kh + khi) * kw + kwi];
                    }
                }
            }
        }
        let (out, _) = conv2d_oracle(
            &stuffed,
            (n, cin, sh, sw),
            &flipped,
            (cout, kh, kw),
            1,
            kh - 1 - pad,
        );
        out
    }

    fn inner_product<T: Real>(a: &[T], b: &[T]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
    }

    // -- conv2d -------------------------------------------------------------

    #[test]
    fn conv2d_all_ones_sums_window() {
        let x = Tensor::<f32>::full(vec![1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(vec![1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let x = randn_tensor::<f32>(&[2, 1, 5, 4], 11);
        let w = Tensor::<f32>::from_vec(vec![1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_matches_loop_oracle_on_seeded_case() {
        let (dims, kdims, stride, pad) = ((2, 3, 8, 8), (4, 3, 3), 2, 1);
        let x = randn_tensor::<f32>(&[dims.0, dims.1, dims.2, dims.3], 21);
        let w = randn_tensor::<f32>(&[kdims.0, dims.1, kdims.1, kdims.2], 22);
        let y = conv2d(&x, &w, None, stride, pad).unwrap();
        let (expected, (oh, ow)) =
            conv2d_oracle(&x.data(), dims, &w.data(), kdims, stride, pad);
        assert_eq!(y.shape(), &[2, 4, oh, ow]);
        assert!(max_abs_diff(&y.to_vec(), &expected) <= 1e-5);
    }

    #[test]
    fn conv2d_bias_adds_per_channel() {
        let x = Tensor::<f32>::full(vec![1, 1, 2, 2], 0.0);
        let w = Tensor::<f32>::full(vec![2, 1, 1, 1], 1.0);
        let b = Tensor::<f32>::from_vec(vec![2], vec![0.5, -1.5]);
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5, 0.5, 0.5, -1.5, -1.5, -1.5, -1.5]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![2, 4, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channels"), "unexpected message: {msg}");
        assert!(msg.contains('3') && msg.contains('4'), "should name the dims: {msg}");
    }

    #[test]
    fn conv2d_deterministic_across_calls() {
        let x = randn_tensor::<f32>(&[1, 2, 6, 6], 31);
        let w = randn_tensor::<f32>(&[3, 2, 3, 3], 32);
        let a = conv2d(&x, &w, None, 1, 1).unwrap().to_vec();
        let b = conv2d(&x, &w, None, 1, 1).unwrap().to_vec();
        assert_eq!(a, b, "forward must be bitwise reproducible");
    }

    #[test]
    fn conv2d_gradients_pass_finite_difference_check() {
        for (seed, shape, kshape, stride, pad) in [
            (1u64, [1, 2, 5, 5], [3, 2, 3, 3], 1, 1),
            (2, [2, 1, 6, 4], [2, 1, 3, 3], 2, 0),
            (3, [1, 3, 4, 4], [1, 3, 2, 2], 1, 1),
        ] {
            let x = randn_param::<f64>(&shape, seed);
            let w = randn_param::<f64>(&kshape, seed + 100);
            let b = randn_param::<f64>(&[kshape[0]], seed + 200);
            let target = randn_tensor::<f64>(
                conv2d(&x, &w, Some(&b), stride, pad).unwrap().shape(),
                seed + 300,
            );
            let f = |inputs: &[Tensor<f64>]| {
                let y = conv2d(&inputs[0], &inputs[1], Some(&inputs[2]), stride, pad)?;
                l1_loss(&y, &target)
            };
            let err = grad_check(&f, &[x, w, b], 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: relative error {err}");
        }
    }

    // -- conv_transpose2d ----------------------------------------------------

    #[test]
    fn conv_transpose2d_broadcasts_single_tap() {
        let v = 2.75f32;
        let x = Tensor::<f32>::full(vec![1, 1, 1, 1], v);
        let w = Tensor::<f32>::full(vec![1, 1, 2, 2], 1.0);
        let y = conv_transpose2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![v; 4]);
    }

    #[test]
    fn conv_transpose2d_matches_zero_stuffing_oracle() {
        let (dims, kdims, stride, pad) = ((2, 3, 5, 4), (2, 4, 4), 2, 1);
        let x = randn_tensor::<f32>(&[dims.0, dims.1, dims.2, dims.3], 41);
        let w = randn_tensor::<f32>(&[dims.1, kdims.0, kdims.1, kdims.2], 42);
        let y = conv_transpose2d(&x, &w, None, stride, pad).unwrap();
        let expected = conv_transpose2d_oracle(&x.data(), dims, &w.data(), kdims, stride, pad);
        assert_eq!(y.len(), expected.len());
        assert!(max_abs_diff(&y.to_vec(), &expected) <= 1e-5);
    }

    #[test]
    fn adjoint_identity_couples_conv_and_transpose() {
        // ⟨conv2d(x, w), y⟩ == ⟨x, conv_transpose2d(y, w)⟩ for the same weight
        // buffer, across strides and paddings.
        for (seed, stride, pad, side) in [(51u64, 1, 0, 9), (52, 2, 1, 10), (53, 3, 2, 9)] {
            let x = randn_tensor::<f64>(&[2, 3, side, side], seed);
            let w = randn_tensor::<f64>(&[4, 3, 4, 4], seed + 10);
            let cx = conv2d(&x, &w, None, stride, pad).unwrap();
            let y = randn_tensor::<f64>(cx.shape(), seed + 20);
            let ty = conv_transpose2d(&y, &w, None, stride, pad).unwrap();
            assert_eq!(ty.shape(), x.shape(), "adjoint output shape");
            let lhs = inner_product(&cx.data(), &y.data());
            let rhs = inner_product(&x.data(), &ty.data());
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
            assert!(rel <= 1e-4, "stride {stride} pad {pad}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_transpose2d_gradients_pass_finite_difference_check() {
        for (seed, shape, cout, k, stride, pad) in [
            (61u64, [1, 2, 3, 3], 3, 4, 2, 1),
            (62, [2, 1, 4, 4], 2, 3, 1, 0),
            (63, [1, 3, 2, 2], 1, 4, 2, 1),
        ] {
            let x = randn_param::<f64>(&shape, seed);
            let w = randn_param::<f64>(&[shape[1], cout, k, k], seed + 100);
            let b = randn_param::<f64>(&[cout], seed + 200);
            let target = randn_tensor::<f64>(
                conv_transpose2d(&x, &w, Some(&b), stride, pad).unwrap().shape(),
                seed + 300,
            );
            let f = |inputs: &[Tensor<f64>]| {
                let y = conv_transpose2d(&inputs[0], &inputs[1], Some(&inputs[2]), stride, pad)?;
                l1_loss(&y, &target)
            };
            let err = grad_check(&f, &[x, w, b], 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: relative error {err}");
        }
    }

    // -- normalization --------------------------------------------------------

    fn fresh_stats<T: Real>(c: usize) -> (Rc<RefCell<Vec<T>>>, Rc<RefCell<Vec<T>>>) {
        (
            Rc::new(RefCell::new(vec![T::zero(); c])),
            Rc::new(RefCell::new(vec![T::one(); c])),
        )
    }

    #[test]
    fn batch_norm_train_normalizes_each_channel() {
        let x = randn_tensor::<f32>(&[4, 3, 5, 5], 71);
        let gamma = Tensor::<f32>::full(vec![3], 1.0);
        let beta = Tensor::<f32>::zeros(vec![3]);
        let (rm, rv) = fresh_stats::<f32>(3);
        let y = batch_norm2d(&x, &gamma, &beta, &rm, &rv, 0.1, 1e-5, NormMode::Train).unwrap();
        let data = y.to_vec();
        let m = 4 * 5 * 5;
        for c in 0..3 {
            let mut vals = Vec::with_capacity(m);
            for n in 0..4 {
                let base = (n * 3 + c) * 25;
                vals.extend_from_slice(&data[base..base + 25]);
            }
            let mean: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var: f64 =
                vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
            assert!(mean.abs() <= 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn batch_norm_constant_channel_yields_zeros() {
        let x = Tensor::<f32>::full(vec![2, 1, 3, 3], 7.5);
        let gamma = Tensor::<f32>::full(vec![1], 1.0);
        let beta = Tensor::<f32>::zeros(vec![1]);
        let (rm, rv) = fresh_stats::<f32>(1);
        let y = batch_norm2d(&x, &gamma, &beta, &rm, &rv, 0.1, 1e-5, NormMode::Train).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_eval_replays_running_stats() {
        let x = Tensor::<f64>::from_vec(vec![1, 2, 1, 2], vec![1.0, 3.0, -2.0, 4.0]);
        let gamma = Tensor::<f64>::from_vec(vec![2], vec![2.0, 0.5]);
        let beta = Tensor::<f64>::from_vec(vec![2], vec![0.25, -1.0]);
        let rm = Rc::new(RefCell::new(vec![1.5, 0.5]));
        let rv = Rc::new(RefCell::new(vec![4.0, 0.25]));
        let eps = 1e-5;
        let y = batch_norm2d(&x, &gamma, &beta, &rm, &rv, 0.1, eps, NormMode::Eval).unwrap();
        let expect = |v: f64, mu: f64, var: f64, g: f64, b: f64| (v - mu) / (var + eps).sqrt() * g + b;
        let got = y.to_vec();
        assert_close(got[0], expect(1.0, 1.5, 4.0, 2.0, 0.25), 1e-12, "y[0]");
        assert_close(got[1], expect(3.0, 1.5, 4.0, 2.0, 0.25), 1e-12, "y[1]");
        assert_close(got[2], expect(-2.0, 0.5, 0.25, 0.5, -1.0), 1e-12, "y[2]");
        assert_close(got[3], expect(4.0, 0.5, 0.25, 0.5, -1.0), 1e-12, "y[3]");
    }

    #[test]
    fn batch_norm_rejects_empty_batch() {
        let x = Tensor::<f32>::zeros(vec![0, 2, 3, 3]);
        let gamma = Tensor::<f32>::full(vec![2], 1.0);
        let beta = Tensor::<f32>::zeros(vec![2]);
        let (rm, rv) = fresh_stats::<f32>(2);
        assert!(batch_norm2d(&x, &gamma, &beta, &rm, &rv, 0.1, 1e-5, NormMode::Train).is_err());
    }

    #[test]
    fn batch_norm_updates_running_stats_with_momentum() {
        let x = Tensor::<f64>::from_vec(vec![1, 1, 1, 2], vec![2.0, 4.0]);
        let gamma = Tensor::<f64>::full(vec![1], 1.0);
        let beta = Tensor::<f64>::zeros(vec![1]);
        let (rm, rv) = fresh_stats::<f64>(1);
        batch_norm2d(&x, &gamma, &beta, &rm, &rv, 0.1, 1e-5, NormMode::Train).unwrap();
        // batch mean 3, biased var 1; running starts at (0, 1)
        assert_close(rm.borrow()[0], 0.9 * 0.0 + 0.1 * 3.0, 1e-12, "running mean");
        assert_close(rv.borrow()[0], 0.9 * 1.0 + 0.1 * 1.0, 1e-12, "running var");
    }

    #[test]
    fn batch_norm_gradients_pass_finite_difference_check() {
        for (seed, shape) in [(81u64, [2, 2, 3, 3]), (82, [3, 1, 2, 4]), (83, [1, 3, 2, 2])] {
            let c = shape[1];
            let x = randn_param::<f64>(&shape, seed);
            let gamma = randn_param::<f64>(&[c], seed + 1);
            let beta = randn_param::<f64>(&[c], seed + 2);
            let target = sign_target::<f64>(&shape, seed + 3, 10.0);
            for mode in [NormMode::Train, NormMode::Eval] {
                let f = |inputs: &[Tensor<f64>]| {
                    let (rm, rv) = fresh_stats::<f64>(c);
                    let y = batch_norm2d(&inputs[0], &inputs[1], &inputs[2], &rm, &rv, 0.1, 1e-5, mode)?;
                    l1_loss(&y, &target)
                };
                let err = grad_check(&f, &[x.clone(), gamma.clone(), beta.clone()], 1e-6).unwrap();
                assert!(err <= 1e-4, "seed {seed} {mode:?}: relative error {err}");
            }
        }
    }

    #[test]
    fn instance_norm_matches_batch_norm_at_single_sample() {
        let x = randn_tensor::<f64>(&[1, 3, 4, 4], 91);
        let gamma = randn_tensor::<f64>(&[3], 92);
        let beta = randn_tensor::<f64>(&[3], 93);
        let (rm, rv) = fresh_stats::<f64>(3);
        let bn = batch_norm2d(&x, &gamma, &beta, &rm, &rv, 0.1, 1e-5, NormMode::Train).unwrap();
        let inorm = instance_norm2d(&x, &gamma, &beta, 1e-5).unwrap();
        assert!(max_abs_diff(&bn.to_vec(), &inorm.to_vec()) <= 1e-12);
    }

    #[test]
    fn instance_norm_constant_channel_yields_zeros() {
        let x = Tensor::<f32>::full(vec![2, 2, 3, 3], -4.25);
        let gamma = Tensor::<f32>::full(vec![2], 1.0);
        let beta = Tensor::<f32>::zeros(vec![2]);
        let y = instance_norm2d(&x, &gamma, &beta, 1e-5).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_matches_direct_formula() {
        let x = randn_tensor::<f64>(&[2, 2, 3, 3], 94);
        let gamma = randn_tensor::<f64>(&[2], 95);
        let beta = randn_tensor::<f64>(&[2], 96);
        let eps = 1e-5;
        let y = instance_norm2d(&x, &gamma, &beta, eps).unwrap();
        let xd = x.to_vec();
        let g = gamma.to_vec();
        let b = beta.to_vec();
        let got = y.to_vec();
        for group in 0..4 {
            let base = group * 9;
            let c = group % 2;
            let row = &xd[base..base + 9];
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            for j in 0..9 {
                let expected = (row[j] - mean) / (var + eps).sqrt() * g[c] + b[c];
                assert_close(got[base + j], expected, 1e-5, "instance norm element");
            }
        }
    }

    #[test]
    fn instance_norm_gradients_pass_finite_difference_check() {
        for (seed, shape) in [(101u64, [1, 2, 3, 3]), (102, [2, 1, 4, 2]), (103, [2, 2, 2, 2])] {
            let c = shape[1];
            let x = randn_param::<f64>(&shape, seed);
            let gamma = randn_param::<f64>(&[c], seed + 1);
            let beta = randn_param::<f64>(&[c], seed + 2);
            let target = sign_target::<f64>(&shape, seed + 3, 10.0);
            let f = |inputs: &[Tensor<f64>]| {
                let y = instance_norm2d(&inputs[0], &inputs[1], &inputs[2], 1e-5)?;
                l1_loss(&y, &target)
            };
            let err = grad_check(&f, &[x, gamma, beta], 1e-6).unwrap();
            assert!(err <= 1e-4, "seed {seed}: relative error {err}");
        }
    }

    // -- activations ----------------------------------------------------------

    #[test]
    fn activation_reference_points() {
        let x = Tensor::<f64>::from_vec(vec![1], vec![-1.0]);
        assert_close(leaky_relu(&x, 0.2).item(), -0.2, 1e-12, "leaky_relu(-1, 0.2)");
        let zero = Tensor::<f64>::scalar(0.0);
        assert_close(tanh(&zero).item(), 0.0, 1e-12, "tanh(0)");
        assert_close(sigmoid(&zero).item(), 0.5, 1e-12, "sigmoid(0)");
        let neg = Tensor::<f64>::scalar(-3.0);
        assert_close(relu(&neg).item(), 0.0, 1e-12, "relu(-3)");
    }

    #[test]
    fn activation_gradients_pass_finite_difference_check() {
        // Inputs are nudged away from the relu/leaky kink.
        let make_input = |seed: u64| {
            let mut v = randn_vec::<f64>(8, seed, 1.0);
            for x in &mut v {
                if x.abs() < 0.1 {
                    *x += 0.2;
                }
            }
            Tensor::<f64>::param(vec![8], v)
        };
        type Act = fn(&Tensor<f64>) -> Tensor<f64>;
        let acts: Vec<(&str, Act)> = vec![
            ("relu", relu as Act),
            ("leaky_relu", (|x| leaky_relu(x, 0.2)) as Act),
            ("tanh", tanh as Act),
            ("sigmoid", sigmoid as Act),
        ];
        for (name, act) in acts {
            for seed in [111u64, 112, 113] {
                let x = make_input(seed);
                let target = randn_tensor::<f64>(&[8], seed + 9);
                let f = |inputs: &[Tensor<f64>]| l1_loss(&act(&inputs[0]), &target);
                let err = grad_check(&f, &[x], 1e-6).unwrap();
                assert!(err <= 1e-4, "{name} seed {seed}: relative error {err}");
            }
        }
    }

    // -- structural ops ---------------------------------------------------------

    #[test]
    fn concat_channels_stacks_and_splits() {
        let a = randn_param::<f64>(&[2, 2, 3, 3], 121);
        let b = randn_param::<f64>(&[2, 1, 3, 3], 122);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        let target = randn_tensor::<f64>(&[2, 3, 3, 3], 123);
        let f = |inputs: &[Tensor<f64>]| {
            let y = concat_channels(&inputs[0], &inputs[1])?;
            l1_loss(&y, &target)
        };
        let err = grad_check(&f, &[a, b], 1e-6).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        #[rustfmt::skip]
        let x = Tensor::<f32>::from_vec(vec![1, 1, 2, 2], vec![
            1.0, 2.0,
            3.0, 4.0,
        ]);
        let y = reflect_pad2d(&x, 1).unwrap();
        #[rustfmt::skip]
        let expected = vec![
            4.0, 3.0, 4.0, 3.0,
            2.0, 1.0, 2.0, 1.0,
            4.0, 3.0, 4.0, 3.0,
            2.0, 1.0, 2.0, 1.0,
        ];
        assert_eq!(y.to_vec(), expected);
    }

    #[test]
    fn reflect_pad_gradients_pass_finite_difference_check() {
        for seed in [131u64, 132, 133] {
            let x = randn_param::<f64>(&[1, 2, 3, 4], seed);
            let target = randn_tensor::<f64>(&[1, 2, 5, 6], seed + 1);
            let f = |inputs: &[Tensor<f64>]| l1_loss(&reflect_pad2d(&inputs[0], 1)?, &target);
            let err = grad_check(&f, &[x], 1e-6).unwrap();
            assert!(err <= 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn broadcast_add_channels_spreads_bias() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        let b = Tensor::<f64>::from_vec(vec![1, 2, 1, 1], vec![0.5, -2.0]);
        let y = broadcast_add_channels(&x, &b).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5, 0.5, 0.5, -2.0, -2.0, -2.0, -2.0]);
        let xp = randn_param::<f64>(&[2, 3, 2, 2], 141);
        let bp = randn_param::<f64>(&[2, 3, 1, 1], 142);
        let target = randn_tensor::<f64>(&[2, 3, 2, 2], 143);
        let f = |inputs: &[Tensor<f64>]| {
            l1_loss(&broadcast_add_channels(&inputs[0], &inputs[1])?, &target)
        };
        let err = grad_check(&f, &[xp, bp], 1e-6).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn dropout_masks_and_scales() {
        let x = Tensor::<f32>::full(vec![1, 1, 16, 16], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = dropout(&x, 0.5, &mut rng).unwrap();
        let vals = y.to_vec();
        let zeros = vals.iter().filter(|&&v| v == 0.0).count();
        let kept = vals.iter().filter(|&&v| (v - 2.0).abs() < 1e-6).count();
        assert_eq!(zeros + kept, vals.len(), "values are either dropped or scaled");
        assert!(zeros > 50 && zeros < 200, "drop rate wildly off: {zeros}/256");

        // Same seed, same mask.
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let y2 = dropout(&x, 0.5, &mut rng2).unwrap();
        assert_eq!(y.to_vec(), y2.to_vec());
    }

    #[test]
    fn dropout_gradients_pass_finite_difference_check() {
        // Rebuilding the rng per call keeps the graph deterministic for the
        // finite-difference probes.
        for seed in [151u64, 152, 153] {
            let x = randn_param::<f64>(&[1, 1, 4, 4], seed);
            let target = randn_tensor::<f64>(&[1, 1, 4, 4], seed + 1);
            let f = |inputs: &[Tensor<f64>]| {
                let mut rng = ChaCha8Rng::seed_from_u64(999);
                l1_loss(&dropout(&inputs[0], 0.3, &mut rng)?, &target)
            };
            let err = grad_check(&f, &[x], 1e-6).unwrap();
            assert!(err <= 1e-4, "seed {seed}: relative error {err}");
        }
    }

    // -- losses -------------------------------------------------------------

    #[test]
    fn bce_reference_values() {
        let z = Tensor::<f64>::scalar(0.0);
        let one = Tensor::<f64>::scalar(1.0);
        assert_close(
            bce_with_logits(&z, &one).unwrap().item(),
            std::f64::consts::LN_2,
            1e-9,
            "bce(0, 1)",
        );
        let big = Tensor::<f64>::scalar(50.0);
        let v = bce_with_logits(&big, &one).unwrap().item();
        assert!(v.is_finite() && v >= 0.0 && v <= 1e-20, "bce(50, 1) = {v}");
        let huge = Tensor::<f32>::scalar(500.0);
        let zero_t = Tensor::<f32>::scalar(0.0);
        let v = bce_with_logits(&huge, &zero_t).unwrap().item();
        assert!(v.is_finite(), "no overflow on extreme logits");
    }

    #[test]
    fn bce_matches_naive_formula_at_moderate_logits() {
        let z = randn_vec::<f64>(32, 161, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(162);
        let t: Vec<f64> = (0..32).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let naive: f64 = z
            .iter()
            .zip(&t)
            .map(|(&zi, &ti)| {
                let s = 1.0 / (1.0 + (-zi).exp());
                -ti * s.ln() - (1.0 - ti) * (1.0 - s).ln()
            })
            .sum::<f64>()
            / 32.0;
        let loss = bce_with_logits(
            &Tensor::<f64>::from_vec(vec![32], z),
            &Tensor::<f64>::from_vec(vec![32], t),
        )
        .unwrap()
        .item();
        assert_close(loss, naive, 1e-6, "stable vs naive bce");
    }

    #[test]
    fn bce_rejects_targets_outside_unit_interval() {
        let z = Tensor::<f64>::scalar(0.0);
        let bad = Tensor::<f64>::scalar(1.5);
        assert!(bce_with_logits(&z, &bad).is_err());
    }

    #[test]
    fn bce_gradients_pass_finite_difference_check() {
        for seed in [171u64, 172, 173] {
            let z = randn_param::<f64>(&[6], seed);
            let t = Tensor::<f64>::from_vec(vec![6], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
            let f = |inputs: &[Tensor<f64>]| bce_with_logits(&inputs[0], &t);
            let err = grad_check(&f, &[z], 1e-6).unwrap();
            assert!(err <= 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn l1_reference_values() {
        let p = randn_tensor::<f64>(&[7], 181);
        assert_eq!(l1_loss(&p, &p).unwrap().item(), 0.0);
        let shifted = Tensor::<f64>::from_vec(
            vec![7],
            p.data().iter().map(|v| v + 1.0).collect::<Vec<_>>(),
        );
        assert_close(l1_loss(&shifted, &p).unwrap().item(), 1.0, 1e-12, "unit shift");
    }

    #[test]
    fn l1_matches_elementwise_oracle() {
        let p = randn_vec::<f64>(16, 182, 1.0);
        let t = randn_vec::<f64>(16, 183, 1.0);
        let expected: f64 = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / 16.0;
        let loss = l1_loss(
            &Tensor::<f64>::from_vec(vec![16], p),
            &Tensor::<f64>::from_vec(vec![16], t),
        )
        .unwrap()
        .item();
        assert_eq!(loss, expected, "same accumulation order: exact match");
    }

    #[test]
    fn l1_subgradient_is_zero_at_ties() {
        let p = Tensor::<f64>::param(vec![2], vec![1.0, 2.0]);
        let t = Tensor::<f64>::from_vec(vec![2], vec![1.0, 0.0]);
        let loss = l1_loss(&p, &t).unwrap();
        loss.backward();
        let g = p.grad().unwrap();
        assert_eq!(g[0], 0.0, "tied element gets subgradient 0");
        assert_eq!(g[1], 0.5, "non-tied element gets sign/n");
    }

    #[test]
    fn reshape_and_mul_scalar_roundtrip_gradients() {
        let x = randn_param::<f64>(&[2, 3], 191);
        let target = randn_tensor::<f64>(&[6], 192);
        let f = |inputs: &[Tensor<f64>]| {
            let y = mul_scalar(&reshape(&inputs[0], vec![6])?, -2.5);
            l1_loss(&y, &target)
        };
        let err = grad_check(&f, &[x], 1e-6).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }
}

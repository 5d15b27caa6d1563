//! Layer primitives with explicit forward and backward passes.
//!
//! Convolution is cross-correlation (no kernel flip) lowered to im2col plus a
//! GEMM. Padding is always zero padding, and every windowed op requires the
//! output size `(h + 2p - k) / s + 1` to divide exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Output extent of a windowed op along one axis, if it divides exactly.
fn window_out(size: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = size + 2 * p;
    if s == 0 || k == 0 || padded < k || !(padded - k).is_multiple_of(s) {
        return None;
    }
    Some((padded - k) / s + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvSpec {
    pub fn square(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }

    /// Size-preserving `k x k` convolution, stride 1, pad `k / 2`.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self::square(in_channels, out_channels, k, 1, k / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if !matches!(kh, 1 | 3 | 5 | 7) || !matches!(kw, 1 | 3 | 5 | 7) {
            return Err(Error::spec(
                "conv",
                format!("kernel {kh}x{kw} not in {{1,3,5,7}}"),
            ));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::spec("conv", "stride must be >= 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::spec("conv", "channel counts must be >= 1"));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        match (
            window_out(h, self.kernel.0, self.stride.0, self.pad.0),
            window_out(w, self.kernel.1, self.stride.1, self.pad.1),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::spec(
                "conv",
                format!(
                    "input {h}x{w} with kernel {:?}, stride {:?}, pad {:?} does not divide exactly",
                    self.kernel, self.stride, self.pad
                ),
            )),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn fan_out(&self) -> usize {
        self.out_channels * self.kernel.0 * self.kernel.1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl PoolSpec {
    pub fn max(k: usize, stride: usize, pad: usize) -> Self {
        PoolSpec {
            kind: PoolKind::Max,
            window: (k, k),
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }

    pub fn average(k: usize, stride: usize, pad: usize) -> Self {
        PoolSpec {
            kind: PoolKind::Average,
            window: (k, k),
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }

    /// Average over the whole `h x w` plane.
    pub fn global_average(h: usize, w: usize) -> Self {
        PoolSpec {
            kind: PoolKind::Average,
            window: (h, w),
            stride: (1, 1),
            pad: (0, 0),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window.0 == 0 || self.window.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::spec("pool", "window and stride must be >= 1"));
        }
        match (
            window_out(h, self.window.0, self.stride.0, self.pad.0),
            window_out(w, self.window.1, self.stride.1, self.pad.1),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::spec(
                "pool",
                format!(
                    "input {h}x{w} with window {:?}, stride {:?}, pad {:?} does not divide exactly",
                    self.window, self.stride, self.pad
                ),
            )),
        }
    }
}

/// A learnable tensor with its gradient and optimizer slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Running sum of squared gradients (ADAGRAD).
    pub accum: Tensor,
    /// Momentum buffer (SGD with momentum).
    pub velocity: Tensor,
}

impl Param {
    pub fn zeros(shape: Shape) -> Result<Self> {
        let z = Tensor::zeros(shape)?;
        Ok(Param {
            value: z.clone(),
            grad: z.clone(),
            accum: z.clone(),
            velocity: z,
        })
    }

    pub fn from_value(value: Tensor) -> Self {
        let z = value.zeros_like();
        Param {
            value,
            grad: z.clone(),
            accum: z.clone(),
            velocity: z,
        }
    }
}

/// Weights `(out, in, kh, kw)` and bias `(1, out, 1, 1)` of one parameterized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub weights: Param,
    pub bias: Param,
}

impl LayerState {
    pub fn conv(spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(LayerState {
            weights: Param::zeros([
                spec.out_channels,
                spec.in_channels,
                spec.kernel.0,
                spec.kernel.1,
            ])?,
            bias: Param::zeros([1, spec.out_channels, 1, 1])?,
        })
    }

    pub fn dense(inputs: usize, outputs: usize) -> Result<Self> {
        Ok(LayerState {
            weights: Param::zeros([outputs, inputs, 1, 1])?,
            bias: Param::zeros([1, outputs, 1, 1])?,
        })
    }

    pub fn zero_grads(&mut self) {
        self.weights.grad.fill(0.0);
        self.bias.grad.fill(0.0);
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weights, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weights, &mut self.bias]
    }

    pub fn num_params(&self) -> usize {
        self.weights.value.len() + self.bias.value.len()
    }
}

/// `c = alpha * a * b + beta * c` for strided row/column-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || a.len() > last(m, k, rsa, csa));
    assert!(k == 0 || b.len() > last(k, n, rsb, csb));
    assert!(c.len() > last(m, n, rsc, csc));
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == (1, 1) && spec.stride == (1, 1) && spec.pad == (0, 0)
}

/// Output positions `o` in `0..n_out` with `o * stride + k - pad` inside `0..size`.
#[inline]
fn valid_range(n_out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // largest o with o*stride + k - pad < size
    let lim = size + pad;
    let hi = if k >= lim {
        0
    } else {
        ((lim - k - 1) / stride + 1).min(n_out)
    };
    (lo.min(hi), hi)
}

/// Unfold batch item `b` into a `(cin*kh*kw, oh*ow)` column matrix.
fn im2col(x: &Tensor, b: usize, spec: &ConvSpec, oh: usize, ow: usize, cols: &mut [f64]) {
    let (h, w) = (x.h(), x.w());
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let plane = oh * ow;
    let data = x.data();
    let mut row = 0;
    for ci in 0..spec.in_channels {
        let base = x.index(b, ci, 0, 0);
        for ky in 0..kh {
            let (y_lo, y_hi) = valid_range(oh, h, ky, sh, ph);
            for kx in 0..kw {
                let (x_lo, x_hi) = valid_range(ow, w, kx, sw, pw);
                let out = &mut cols[row * plane..(row + 1) * plane];
                out[..y_lo * ow].fill(0.0);
                out[y_hi * ow..].fill(0.0);
                for oy in y_lo..y_hi {
                    let iy = oy * sh + ky - ph;
                    let dst = &mut out[oy * ow..(oy + 1) * ow];
                    dst[..x_lo].fill(0.0);
                    dst[x_hi..].fill(0.0);
                    if x_lo == x_hi {
                        continue;
                    }
                    let src = &data[base + iy * w..base + (iy + 1) * w];
                    let ix0 = x_lo * sw + kx - pw;
                    if sw == 1 {
                        dst[x_lo..x_hi].copy_from_slice(&src[ix0..ix0 + (x_hi - x_lo)]);
                    } else {
                        for (j, d) in dst[x_lo..x_hi].iter_mut().enumerate() {
                            *d = src[ix0 + j * sw];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add columns back into batch item `b` of `dx`.
fn col2im(cols: &[f64], b: usize, spec: &ConvSpec, oh: usize, ow: usize, dx: &mut Tensor) {
    let (h, w) = (dx.h(), dx.w());
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let plane = oh * ow;
    let mut row = 0;
    for ci in 0..spec.in_channels {
        let base = dx.index(b, ci, 0, 0);
        let data = dx.data_mut();
        for ky in 0..kh {
            let (y_lo, y_hi) = valid_range(oh, h, ky, sh, ph);
            for kx in 0..kw {
                let (x_lo, x_hi) = valid_range(ow, w, kx, sw, pw);
                let src = &cols[row * plane..(row + 1) * plane];
                row += 1;
                if x_lo == x_hi {
                    continue;
                }
                for oy in y_lo..y_hi {
                    let iy = oy * sh + ky - ph;
                    let dst_row = base + iy * w;
                    let ix0 = x_lo * sw + kx - pw;
                    let s = &src[oy * ow + x_lo..oy * ow + x_hi];
                    for (j, &v) in s.iter().enumerate() {
                        data[dst_row + ix0 + j * sw] += v;
                    }
                }
            }
        }
    }
}

fn check_state_shapes(spec: &ConvSpec, state: &LayerState) -> Result<()> {
    let want = [
        spec.out_channels,
        spec.in_channels,
        spec.kernel.0,
        spec.kernel.1,
    ];
    if state.weights.value.shape() != want {
        return Err(Error::ShapeMismatch {
            op: "conv weights",
            expected: want,
            got: state.weights.value.shape(),
        });
    }
    let want_b = [1, spec.out_channels, 1, 1];
    if state.bias.value.shape() != want_b {
        return Err(Error::ShapeMismatch {
            op: "conv bias",
            expected: want_b,
            got: state.bias.value.shape(),
        });
    }
    Ok(())
}

pub fn conv_forward(x: &Tensor, spec: &ConvSpec, state: &LayerState) -> Result<Tensor> {
    if x.c() != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv_forward channels",
            expected: [x.n(), spec.in_channels, x.h(), x.w()],
            got: x.shape(),
        });
    }
    check_state_shapes(spec, state)?;
    let (oh, ow) = spec.output_hw(x.h(), x.w())?;
    let n = x.n();
    let cout = spec.out_channels;
    let k = spec.fan_in();
    let plane = oh * ow;
    let mut y = Tensor::zeros([n, cout, oh, ow])?;
    let bias = state.bias.value.data();
    for b in 0..n {
        let dst_off = b * cout * plane;
        let dst = &mut y.data_mut()[dst_off..dst_off + cout * plane];
        for (co, chunk) in dst.chunks_exact_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
    }
    let weights = state.weights.value.data();
    let mut cols = if is_pointwise(spec) {
        Vec::new()
    } else {
        vec![0.0; k * plane]
    };
    for b in 0..n {
        let src: &[f64] = if is_pointwise(spec) {
            let off = x.index(b, 0, 0, 0);
            &x.data()[off..off + k * plane]
        } else {
            im2col(x, b, spec, oh, ow, &mut cols);
            &cols
        };
        let dst_off = b * cout * plane;
        gemm(
            cout,
            k,
            plane,
            weights,
            (k, 1),
            src,
            (plane, 1),
            1.0,
            &mut y.data_mut()[dst_off..dst_off + cout * plane],
            (plane, 1),
        );
    }
    y.ensure_finite("conv_forward")?;
    Ok(y)
}

/// Accumulate weight and bias gradients; return `dx` when `need_dx`.
pub fn conv_backward_impl(
    x: &Tensor,
    dy: &Tensor,
    spec: &ConvSpec,
    state: &mut LayerState,
    need_dx: bool,
) -> Result<Option<Tensor>> {
    if x.c() != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv_backward channels",
            expected: [x.n(), spec.in_channels, x.h(), x.w()],
            got: x.shape(),
        });
    }
    check_state_shapes(spec, state)?;
    let (oh, ow) = spec.output_hw(x.h(), x.w())?;
    let n = x.n();
    let cout = spec.out_channels;
    let want = [n, cout, oh, ow];
    if dy.shape() != want {
        return Err(Error::ShapeMismatch {
            op: "conv_backward dy",
            expected: want,
            got: dy.shape(),
        });
    }
    let k = spec.fan_in();
    let plane = oh * ow;
    let pointwise = is_pointwise(spec);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0; k * plane]
    };
    let mut dcols = vec![0.0; k * plane];
    let mut dx = if need_dx { Some(x.zeros_like()) } else { None };

    {
        let gb = state.bias.grad.data_mut();
        for b in 0..n {
            for (co, g) in gb.iter_mut().enumerate() {
                let off = dy.index(b, co, 0, 0);
                *g += dy.data()[off..off + plane].iter().sum::<f64>();
            }
        }
    }

    for b in 0..n {
        let dy_b = &dy.data()[b * cout * plane..(b + 1) * cout * plane];
        let src: &[f64] = if pointwise {
            let off = x.index(b, 0, 0, 0);
            &x.data()[off..off + k * plane]
        } else {
            im2col(x, b, spec, oh, ow, &mut cols);
            &cols
        };
        // dW += dY_b * cols_b^T
        gemm(
            cout,
            plane,
            k,
            dy_b,
            (plane, 1),
            src,
            (1, plane),
            1.0,
            state.weights.grad.data_mut(),
            (k, 1),
        );
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T * dY_b
            gemm(
                k,
                cout,
                plane,
                state.weights.value.data(),
                (1, k),
                dy_b,
                (plane, 1),
                0.0,
                &mut dcols,
                (plane, 1),
            );
            if pointwise {
                let off = dx.index(b, 0, 0, 0);
                for (d, s) in dx.data_mut()[off..off + k * plane].iter_mut().zip(&dcols) {
                    *d += s;
                }
            } else {
                col2im(&dcols, b, spec, oh, ow, dx);
            }
        }
    }
    if let Some(dx) = &dx {
        dx.ensure_finite("conv_backward")?;
    }
    state.weights.grad.ensure_finite("conv_backward weights")?;
    Ok(dx)
}

/// Gradient w.r.t. the input; accumulates `grad_weights` and `grad_bias` in `state`.
pub fn conv_backward(
    x: &Tensor,
    dy: &Tensor,
    spec: &ConvSpec,
    state: &mut LayerState,
) -> Result<Tensor> {
    Ok(conv_backward_impl(x, dy, spec, state, true)?.expect("dx requested"))
}

/// Saved routing information for `pool_backward`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    pub input_shape: Shape,
    /// Flat input index of each window's winner for max pooling; `None` for
    /// average pooling. `usize::MAX` marks a window won by zero padding.
    pub argmax: Option<Vec<usize>>,
}

pub const PADDING_WINNER: usize = usize::MAX;

pub fn pool_forward(x: &Tensor, spec: &PoolSpec) -> Result<(Tensor, PoolIndices)> {
    let (oh, ow) = spec.output_hw(x.h(), x.w())?;
    let mut y = Tensor::zeros([x.n(), x.c(), oh, ow])?;
    let argmax = match spec.kind {
        // separable passes only pay off when windows overlap
        PoolKind::Max if spec.stride.0 < spec.window.0 || spec.stride.1 < spec.window.1 => {
            Some(max_pool_separable(x, spec, oh, ow, y.data_mut()))
        }
        PoolKind::Max => Some(max_pool_direct(x, spec, oh, ow, y.data_mut())),
        PoolKind::Average => {
            average_pool(x, spec, oh, ow, y.data_mut());
            None
        }
    };
    y.ensure_finite("pool_forward")?;
    Ok((
        y,
        PoolIndices {
            input_shape: x.shape(),
            argmax,
        },
    ))
}

fn max_pool_direct(
    x: &Tensor,
    spec: &PoolSpec,
    oh: usize,
    ow: usize,
    yd: &mut [f64],
) -> Vec<usize> {
    let [n, c, h, w] = x.shape();
    let (kh, kw) = spec.window;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let xd = x.data();
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let mut out = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let y0 = (oy * sh) as isize - ph as isize;
            for ox in 0..ow {
                let x0 = (ox * sw) as isize - pw as isize;
                let interior = y0 >= 0 && x0 >= 0 && y0 as usize + kh <= h && x0 as usize + kw <= w;
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = PADDING_WINNER;
                for ky in 0..kh {
                    let iy = y0 + ky as isize;
                    for kx in 0..kw {
                        let ix = x0 + kx as isize;
                        let (v, idx) = if interior
                            || (iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w)
                        {
                            let i = base + iy as usize * w + ix as usize;
                            (xd[i], i)
                        } else {
                            (0.0, PADDING_WINNER)
                        };
                        // strict '>' keeps the first maximum in row-major scan order
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                yd[out] = best;
                argmax.push(best_idx);
                out += 1;
            }
        }
    }
    argmax
}

/// Max pooling as a row pass then a column pass. The first maximum in
/// row-major window order is the first row holding the window maximum,
/// and the first column within that row, so strict `>` in both passes
/// reproduces the direct scan's tie rule exactly.
fn max_pool_separable(
    x: &Tensor,
    spec: &PoolSpec,
    oh: usize,
    ow: usize,
    yd: &mut [f64],
) -> Vec<usize> {
    let [n, c, h, w] = x.shape();
    let (kh, kw) = spec.window;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let xd = x.data();
    let mut argmax = vec![PADDING_WINNER; n * c * oh * ow];
    let mut row_val = vec![0.0; h * ow];
    let mut row_idx = vec![PADDING_WINNER; h * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for iy in 0..h {
            let src = &xd[base + iy * w..base + (iy + 1) * w];
            for ox in 0..ow {
                let x0 = (ox * sw) as isize - pw as isize;
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = PADDING_WINNER;
                if x0 >= 0 && x0 as usize + kw <= w {
                    let x0 = x0 as usize;
                    for (kx, &v) in src[x0..x0 + kw].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = base + iy * w + x0 + kx;
                        }
                    }
                } else {
                    for kx in 0..kw {
                        let ix = x0 + kx as isize;
                        let (v, idx) = if ix >= 0 && (ix as usize) < w {
                            (src[ix as usize], base + iy * w + ix as usize)
                        } else {
                            (0.0, PADDING_WINNER)
                        };
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                row_val[iy * ow + ox] = best;
                row_idx[iy * ow + ox] = best_idx;
            }
        }
        let out = plane * oh * ow;
        for oy in 0..oh {
            let y0 = (oy * sh) as isize - ph as isize;
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = PADDING_WINNER;
                for ky in 0..kh {
                    let iy = y0 + ky as isize;
                    // a padding row is all zeros and its first cell is padding
                    let (v, idx) = if iy >= 0 && (iy as usize) < h {
                        let r = iy as usize * ow + ox;
                        (row_val[r], row_idx[r])
                    } else {
                        (0.0, PADDING_WINNER)
                    };
                    if v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                yd[out + oy * ow + ox] = best;
                argmax[out + oy * ow + ox] = best_idx;
            }
        }
    }
    argmax
}

/// Average pooling; padded cells count as zeros in the window area.
fn average_pool(x: &Tensor, spec: &PoolSpec, oh: usize, ow: usize, yd: &mut [f64]) {
    let [n, c, h, w] = x.shape();
    let (kh, kw) = spec.window;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let area = (kh * kw) as f64;
    let xd = x.data();
    let mut out = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let y_lo = (oy * sh).saturating_sub(ph);
            let y_hi = (oy * sh + kh).saturating_sub(ph).min(h);
            for ox in 0..ow {
                let x_lo = (ox * sw).saturating_sub(pw);
                let x_hi = (ox * sw + kw).saturating_sub(pw).min(w);
                let mut sum = 0.0;
                for iy in y_lo..y_hi {
                    let r = base + iy * w;
                    sum += xd[r + x_lo..r + x_hi.max(x_lo)].iter().sum::<f64>();
                }
                yd[out] = sum / area;
                out += 1;
            }
        }
    }
}

pub fn pool_backward(dy: &Tensor, spec: &PoolSpec, saved: &PoolIndices) -> Result<Tensor> {
    let [n, c, h, w] = saved.input_shape;
    let (oh, ow) = spec.output_hw(h, w)?;
    if dy.shape() != [n, c, oh, ow] {
        return Err(Error::ShapeMismatch {
            op: "pool_backward",
            expected: [n, c, oh, ow],
            got: dy.shape(),
        });
    }
    let mut dx = Tensor::zeros(saved.input_shape)?;
    match (&spec.kind, &saved.argmax) {
        (PoolKind::Max, Some(argmax)) => {
            if argmax.len() != dy.len() {
                return Err(Error::State("pool indices do not match dy".into()));
            }
            let dxd = dx.data_mut();
            for (&idx, &g) in argmax.iter().zip(dy.data()) {
                if idx != PADDING_WINNER {
                    dxd[idx] += g;
                }
            }
        }
        (PoolKind::Average, None) => {
            let (kh, kw) = spec.window;
            let (sh, sw) = spec.stride;
            let (ph, pw) = spec.pad;
            let area = (kh * kw) as f64;
            let mut out = 0;
            for b in 0..n {
                for ch in 0..c {
                    let base = dx.index(b, ch, 0, 0);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dy.data()[out] / area;
                            out += 1;
                            for ky in 0..kh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dx.data_mut()[base + iy as usize * w + ix as usize] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => return Err(Error::State("pool indices do not match pool kind".into())),
    }
    Ok(dx)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    relu_in_place(&mut y);
    y
}

pub fn relu_in_place(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Passes `dy` where `x > 0`. The derivative at exactly zero is zero.
///
/// `x` may be either the ReLU input or its output; both have the same
/// positive set.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            expected: x.shape(),
            got: dy.shape(),
        });
    }
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    Ok(dx)
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or(Error::Empty("concat input list"))?;
    let [n, _, h, w] = first.shape();
    for t in xs {
        if t.n() != n || t.h() != h || t.w() != w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                expected: [n, t.c(), h, w],
                got: t.shape(),
            });
        }
    }
    let total: usize = xs.iter().map(|t| t.c()).sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for t in xs {
            let per = t.c() * plane;
            data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
        }
    }
    Tensor::from_vec([n, total, h, w], data)
}

/// Inverse of `concat_channels`: slice `dy` back into per-branch tensors.
pub fn split_channels(dy: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let [n, c, h, w] = dy.shape();
    if channels.iter().sum::<usize>() != c {
        return Err(Error::ShapeMismatch {
            op: "split_channels",
            expected: [n, channels.iter().sum(), h, w],
            got: dy.shape(),
        });
    }
    let plane = h * w;
    let mut outs: Vec<Vec<f64>> = channels
        .iter()
        .map(|&ci| Vec::with_capacity(n * ci * plane))
        .collect();
    for b in 0..n {
        let mut off = b * c * plane;
        for (out, &ci) in outs.iter_mut().zip(channels) {
            out.extend_from_slice(&dy.data()[off..off + ci * plane]);
            off += ci * plane;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &ci)| Tensor::from_vec([n, ci, h, w], d))
        .collect()
}

fn dense_dims(x: &Tensor, state: &LayerState) -> Result<(usize, usize, usize)> {
    let [out, inp, kh, kw] = state.weights.value.shape();
    if kh != 1 || kw != 1 {
        return Err(Error::spec("dense", "weights must be (out, in, 1, 1)"));
    }
    let k = x.c() * x.h() * x.w();
    if k != inp {
        return Err(Error::ShapeMismatch {
            op: "dense input",
            expected: [x.n(), inp, 1, 1],
            got: x.shape(),
        });
    }
    Ok((x.n(), inp, out))
}

/// `y = W x + b` per batch element; `x` is flattened to `(n, c*h*w)`.
pub fn dense_forward(x: &Tensor, state: &LayerState) -> Result<Tensor> {
    let (n, k, out) = dense_dims(x, state)?;
    let mut y = Tensor::zeros([n, out, 1, 1])?;
    let bias = state.bias.value.data();
    for row in y.data_mut().chunks_exact_mut(out) {
        row.copy_from_slice(bias);
    }
    gemm(
        n,
        k,
        out,
        x.data(),
        (k, 1),
        state.weights.value.data(),
        (1, k),
        1.0,
        y.data_mut(),
        (out, 1),
    );
    y.ensure_finite("dense_forward")?;
    Ok(y)
}

/// Accumulates weight/bias gradients and returns `dx` shaped like `x`.
pub fn dense_backward(x: &Tensor, dy: &Tensor, state: &mut LayerState) -> Result<Tensor> {
    let (n, k, out) = dense_dims(x, state)?;
    if dy.shape() != [n, out, 1, 1] {
        return Err(Error::ShapeMismatch {
            op: "dense_backward dy",
            expected: [n, out, 1, 1],
            got: dy.shape(),
        });
    }
    // dW (out x k) += dY^T (out x n) * X (n x k)
    gemm(
        out,
        n,
        k,
        dy.data(),
        (1, out),
        x.data(),
        (k, 1),
        1.0,
        state.weights.grad.data_mut(),
        (k, 1),
    );
    let gb = state.bias.grad.data_mut();
    for row in dy.data().chunks_exact(out) {
        for (g, &d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
    // dX (n x k) = dY (n x out) * W (out x k)
    let mut dx = x.zeros_like();
    gemm(
        n,
        out,
        k,
        dy.data(),
        (out, 1),
        state.weights.value.data(),
        (k, 1),
        0.0,
        dx.data_mut(),
        (k, 1),
    );
    dx.ensure_finite("dense_backward")?;
    Ok(dx)
}

/// Inverted dropout. Returns the output and, in train mode with a nonzero
/// rate, the multiplicative mask (0 or `1/(1-rate)`) needed by the backward pass.
pub fn dropout(
    x: &Tensor,
    rate: f64,
    rng: &mut SeededRng,
    mode: Mode,
) -> Result<(Tensor, Option<Tensor>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Range(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mut mask = x.zeros_like();
    for m in mask.data_mut() {
        *m = if rng.next_f64() < rate {
            0.0
        } else {
            keep_scale
        };
    }
    let y = x.mul(&mask)?;
    Ok((y, Some(mask)))
}

pub fn dropout_backward(dy: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    match mask {
        Some(m) => dy.mul(m),
        None => Ok(dy.clone()),
    }
}

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / n` w.r.t. the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, classes, h, w] = logits.shape();
    if h != 1 || w != 1 {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent",
            expected: [n, classes, 1, 1],
            got: logits.shape(),
        });
    }
    if labels.len() != n {
        return Err(Error::Param(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label {
            label: bad,
            classes,
        });
    }
    let mut grad = logits.zeros_like();
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let (top, max) = row
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
        // log-sum-exp as max + ln(1 + sum over the rest), accurate when saturated
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let lse = max + rest.ln_1p();
        total += lse - row[label];
        let g = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        for (i, gi) in g.iter_mut().enumerate() {
            let p = (row[i] - lse).exp();
            *gi = (p - if i == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_xent".into()));
    }
    Ok((loss, grad))
}

/// Index of the largest logit per batch element; ties go to the lowest class.
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let classes = logits.c() * logits.h() * logits.w();
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                )
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let spec = ConvSpec::square(1, 1, 1, 1, 0);
        let mut st = LayerState::conv(&spec).unwrap();
        st.weights.value.fill(1.0);
        let y = conv_forward(&t([1, 1, 1, 1], &[5.0]), &spec, &st).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let spec = ConvSpec::square(2, 3, 3, 1, 1);
        let mut st = LayerState::conv(&spec).unwrap();
        st.weights.value =
            Tensor::uniform([3, 2, 3, 3], -1.0, 1.0, &mut SeededRng::new(1)).unwrap();
        st.bias.value = t([1, 3, 1, 1], &[0.5, -1.0, 2.0]);
        let y = conv_forward(&Tensor::zeros([2, 2, 4, 4]).unwrap(), &spec, &st).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..16 {
                    assert_eq!(y.at(b, c, i / 4, i % 4), st.bias.value.data()[c]);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let spec = ConvSpec::square(2, 1, 3, 1, 1);
        let st = LayerState::conv(&spec).unwrap();
        let x = Tensor::zeros([1, 3, 4, 4]).unwrap();
        assert!(matches!(
            conv_forward(&x, &spec, &st),
            Err(Error::ShapeMismatch { .. })
        ));
        let spec2 = ConvSpec::square(1, 1, 3, 2, 0);
        let st2 = LayerState::conv(&spec2).unwrap();
        let x2 = Tensor::zeros([1, 1, 4, 4]).unwrap();
        assert!(matches!(
            conv_forward(&x2, &spec2, &st2),
            Err(Error::Spec { .. })
        ));
        let bad_kernel = ConvSpec::square(1, 1, 2, 1, 0);
        assert!(bad_kernel.validate().is_err());
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let spec = ConvSpec::square(2, 2, 3, 1, 1);
        let mut st = LayerState::conv(&spec).unwrap();
        st.weights.value =
            Tensor::uniform([2, 2, 3, 3], -1.0, 1.0, &mut SeededRng::new(2)).unwrap();
        let x = Tensor::uniform([1, 2, 5, 5], -1.0, 1.0, &mut SeededRng::new(3)).unwrap();
        let dy = Tensor::zeros([1, 2, 5, 5]).unwrap();
        let dx = conv_backward(&x, &dy, &spec, &mut st).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(st.weights.grad.data().iter().all(|&v| v == 0.0));
        assert!(st.bias.grad.data().iter().all(|&v| v == 0.0));
        let wrong = Tensor::zeros([1, 2, 4, 4]).unwrap();
        assert!(conv_backward(&x, &wrong, &spec, &mut st).is_err());
    }

    #[test]
    fn pool_basics() {
        let c = Tensor::new([1, 2, 4, 4], 3.0).unwrap();
        let (y, _) = pool_forward(&c, &PoolSpec::max(2, 2, 0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        let (y, _) = pool_forward(&c, &PoolSpec::average(2, 2, 0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));

        let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, _) = pool_forward(&x, &PoolSpec::max(2, 2, 0)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let (y, _) = pool_forward(&x, &PoolSpec::average(2, 2, 0)).unwrap();
        assert_eq!(y.data(), &[2.5]);

        assert!(pool_forward(&x, &PoolSpec::max(3, 2, 0)).is_err());
    }

    #[test]
    fn max_pool_routes_to_single_winner() {
        let x = t([1, 1, 3, 3], &[0.1, 0.7, 0.3, 0.2, 0.9, 0.4, 0.5, 0.6, 0.8]);
        let spec = PoolSpec::max(3, 1, 0);
        let (_, idx) = pool_forward(&x, &spec).unwrap();
        let dx = pool_backward(&t([1, 1, 1, 1], &[2.5]), &spec, &idx).unwrap();
        let expect = [0.0, 0.0, 0.0, 0.0, 2.5, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(dx.data(), &expect);
        let zero = pool_backward(&Tensor::zeros([1, 1, 1, 1]).unwrap(), &spec, &idx).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_pool_tie_goes_to_first_in_scan() {
        let x = t([1, 1, 2, 2], &[1.0, 4.0, 4.0, 4.0]);
        let spec = PoolSpec::max(2, 2, 0);
        let (_, idx) = pool_forward(&x, &spec).unwrap();
        let dx = pool_backward(&t([1, 1, 1, 1], &[1.0]), &spec, &idx).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_and_backward() {
        let x = t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let x = t([1, 1, 1, 2], &[-1.0, 2.0]);
        let dy = t([1, 1, 1, 2], &[5.0, 5.0]);
        assert_eq!(relu_backward(&x, &dy).unwrap().data(), &[0.0, 5.0]);
        let at_zero = t([1, 1, 1, 1], &[0.0]);
        assert_eq!(
            relu_backward(&at_zero, &t([1, 1, 1, 1], &[1.0]))
                .unwrap()
                .data(),
            &[0.0]
        );
    }

    #[test]
    fn concat_and_split() {
        let mut rng = SeededRng::new(4);
        let a = Tensor::uniform([1, 2, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let b = Tensor::uniform([1, 3, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), [1, 5, 4, 4]);
        assert_eq!(c.at(0, 3, 1, 2), b.at(0, 1, 1, 2));
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let parts = split_channels(&c, &[2, 3]).unwrap();
        assert_eq!(parts, vec![a.clone(), b]);
        let bad = Tensor::zeros([1, 1, 3, 4]).unwrap();
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut st = LayerState::dense(3, 3).unwrap();
        for i in 0..3 {
            st.weights.value.set(i, i, 0, 0, 1.0);
        }
        let x = t([2, 3, 1, 1], &[1.0, -2.0, 3.0, 0.5, 0.25, -4.0]);
        assert_eq!(dense_forward(&x, &st).unwrap().data(), x.data());
        st.bias.value = t([1, 3, 1, 1], &[1.0, 2.0, 3.0]);
        let y = dense_forward(&Tensor::zeros([1, 3, 1, 1]).unwrap(), &st).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
        assert!(dense_forward(&Tensor::zeros([1, 4, 1, 1]).unwrap(), &st).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = SeededRng::new(5);
        let x = Tensor::uniform([1, 1, 10, 10], 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(dropout(&x, 0.0, &mut rng, Mode::Train).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, &mut rng, Mode::Eval).unwrap().0, x);
        assert_eq!(dropout(&x, 0.7, &mut rng, Mode::Eval).unwrap().0, x);
        assert!(dropout(&x, 1.0, &mut rng, Mode::Train).is_err());
        assert!(dropout(&x, -0.1, &mut rng, Mode::Train).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = SeededRng::new(6);
        let x = Tensor::uniform([1, 1, 1, 100_000], 0.5, 1.5, &mut rng).unwrap();
        let (y, _) = dropout(&x, 0.5, &mut rng, Mode::Train).unwrap();
        let zeroed = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / y.len() as f64;
        assert!((zeroed - 0.5).abs() < 0.01, "zeroed fraction {zeroed}");
        let (mx, my) = (x.sum() / x.len() as f64, y.sum() / y.len() as f64);
        assert!(((my - mx) / mx).abs() < 0.02, "means {mx} {my}");
    }

    #[test]
    fn softmax_xent_cases() {
        let (loss, _) = softmax_xent(&t([1, 2, 1, 1], &[0.3, 0.3]), &[1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let (loss, _) = softmax_xent(&t([1, 2, 1, 1], &[50.0, 0.0]), &[0]).unwrap();
        assert!((0.0..1e-20).contains(&loss), "loss {loss}");
        assert!(matches!(
            softmax_xent(&t([1, 2, 1, 1], &[0.0, 0.0]), &[2]),
            Err(Error::Label { .. })
        ));
    }

    #[test]
    fn argmax_ties_to_class_zero() {
        let l = t([2, 2, 1, 1], &[0.0, 0.0, -1.0, 1.0]);
        assert_eq!(argmax_classes(&l), vec![0, 1]);
    }
}

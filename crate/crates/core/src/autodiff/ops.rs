//! Differentiable tensor operations recorded on a [`Graph`].

use alloc::vec;
use alloc::vec::Vec;

use super::graph::{Graph, Var};
use crate::math::{self, AxisTaps};
use crate::tensor::Tensor;

fn same_shape(g: &Graph, a: Var, b: Var) {
    assert_eq!(g.value(a).shape(), g.value(b).shape(), "operand shapes differ");
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

pub fn add(g: &mut Graph, a: Var, b: Var) -> Var {
    same_shape(g, a, b);
    let out = zip_with(g.value(a), g.value(b), |x, y| x + y);
    g.push(out, &[a, b], |_: &[&Tensor], _: &Tensor, gr: &Tensor, needs: &[bool]| {
        vec![needs[0].then(|| gr.clone()), needs[1].then(|| gr.clone())]
    })
}

pub fn sub(g: &mut Graph, a: Var, b: Var) -> Var {
    same_shape(g, a, b);
    let out = zip_with(g.value(a), g.value(b), |x, y| x - y);
    g.push(out, &[a, b], |_: &[&Tensor], _: &Tensor, gr: &Tensor, needs: &[bool]| {
        vec![needs[0].then(|| gr.clone()), needs[1].then(|| gr.map(|v| -v))]
    })
}

pub fn mul(g: &mut Graph, a: Var, b: Var) -> Var {
    same_shape(g, a, b);
    let out = zip_with(g.value(a), g.value(b), |x, y| x * y);
    g.push(out, &[a, b], |inp: &[&Tensor], _: &Tensor, gr: &Tensor, needs: &[bool]| {
        vec![
            needs[0].then(|| zip_with(gr, inp[1], |g, y| g * y)),
            needs[1].then(|| zip_with(gr, inp[0], |g, x| g * x)),
        ]
    })
}

/// `s * a + c` with constants `s`, `c`.
pub fn affine(g: &mut Graph, a: Var, s: f64, c: f64) -> Var {
    let out = g.value(a).map(|v| s * v + c);
    g.push(out, &[a], move |_: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        vec![Some(gr.map(|v| s * v))]
    })
}

pub fn scale(g: &mut Graph, a: Var, s: f64) -> Var {
    affine(g, a, s, 0.0)
}

/// Elementwise `f` with derivative `df`, both evaluated on the input.
pub fn unary(
    g: &mut Graph,
    a: Var,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64 + 'static,
) -> Var {
    let out = g.value(a).map(f);
    g.push(out, &[a], move |inp: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        vec![Some(zip_with(gr, inp[0], |g, x| g * df(x)))]
    })
}

pub fn sigmoid(g: &mut Graph, a: Var) -> Var {
    let out = g.value(a).map(math::sigmoid);
    g.push(out, &[a], |_: &[&Tensor], out: &Tensor, gr: &Tensor, _: &[bool]| {
        vec![Some(zip_with(gr, out, |g, s| g * s * (1.0 - s)))]
    })
}

pub fn tanh(g: &mut Graph, a: Var) -> Var {
    let out = g.value(a).map(libm::tanh);
    g.push(out, &[a], |_: &[&Tensor], out: &Tensor, gr: &Tensor, _: &[bool]| {
        vec![Some(zip_with(gr, out, |g, t| g * (1.0 - t * t)))]
    })
}

pub fn relu(g: &mut Graph, a: Var) -> Var {
    let out = g.value(a).map(|v| v.max(0.0));
    g.note_branch(g.value(a).data().iter().filter(|&&x| x > 0.0).count());
    g.push(out, &[a], |inp: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        vec![Some(zip_with(gr, inp[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
    })
}

/// `max(a, lo)`; gradient passes only where the input is above `lo`.
pub fn clamp_min(g: &mut Graph, a: Var, lo: f64) -> Var {
    let out = g.value(a).map(|v| v.max(lo));
    g.note_branch(g.value(a).data().iter().filter(|&&x| x > lo).count());
    g.push(out, &[a], move |inp: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        vec![Some(zip_with(gr, inp[0], |g, x| if x > lo { g } else { 0.0 }))]
    })
}

/// Elementwise clamp to `[-limit, limit]`.
pub fn clamp_abs(g: &mut Graph, a: Var, limit: f64) -> Var {
    let out = g.value(a).map(|v| v.clamp(-limit, limit));
    g.note_branch(g.value(a).data().iter().filter(|&&x| x.abs() < limit).count());
    g.push(out, &[a], move |inp: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        vec![Some(zip_with(gr, inp[0], |g, x| if x.abs() < limit { g } else { 0.0 }))]
    })
}

/// Concatenation along the channel axis of `[C, H, W]` tensors.
pub fn concat(g: &mut Graph, parts: &[Var]) -> Var {
    let (_, h, w) = g.value(parts[0]).chw();
    let mut chans = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for &p in parts {
        let t = g.value(p);
        let (c, ph, pw) = t.chw();
        assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
        chans.push(c);
        data.extend_from_slice(t.data());
    }
    let total: usize = chans.iter().sum();
    let out = Tensor::from_vec(&[total, h, w], data);
    g.push(out, parts, move |_: &[&Tensor], _: &Tensor, gr: &Tensor, needs: &[bool]| {
        let mut off = 0;
        chans
            .iter()
            .zip(needs)
            .map(|(&c, &need)| {
                let s = off * h * w;
                off += c;
                need.then(|| Tensor::from_vec(&[c, h, w], gr.data()[s..s + c * h * w].to_vec()))
            })
            .collect()
    })
}

pub fn slice_channels(g: &mut Graph, a: Var, start: usize, len: usize) -> Var {
    let (c, h, w) = g.value(a).chw();
    assert!(start + len <= c);
    let hw = h * w;
    let out =
        Tensor::from_vec(&[len, h, w], g.value(a).data()[start * hw..(start + len) * hw].to_vec());
    g.push(out, &[a], move |_: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        let mut full = Tensor::zeros(&[c, h, w]);
        full.data_mut()[start * hw..(start + len) * hw].copy_from_slice(gr.data());
        vec![Some(full)]
    })
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum(g: &mut Graph, a: Var) -> Var {
    let shape = g.value(a).shape().to_vec();
    let out = Tensor::scalar(g.value(a).sum());
    g.push(out, &[a], move |_: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        vec![Some(Tensor::full(&shape, gr.data()[0]))]
    })
}

/// `sum(w * a)` for a constant weight tensor `w` of the same length.
pub fn weighted_sum(g: &mut Graph, a: Var, w: Vec<f64>) -> Var {
    assert_eq!(g.value(a).len(), w.len());
    let shape = g.value(a).shape().to_vec();
    let out = Tensor::scalar(g.value(a).data().iter().zip(&w).map(|(x, y)| x * y).sum());
    g.push(out, &[a], move |_: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        let s = gr.data()[0];
        vec![Some(Tensor::from_vec(&shape, w.iter().map(|v| v * s).collect()))]
    })
}

/// Mean of `a` over the pixels where `mask` is set. An empty mask yields 0.
pub fn masked_mean(g: &mut Graph, a: Var, mask: &[bool]) -> Var {
    let n = mask.iter().filter(|&&m| m).count();
    let inv = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let w = mask.iter().map(|&m| if m { inv } else { 0.0 }).collect();
    weighted_sum(g, a, w)
}

/// Sum of `[1]` scalars.
pub fn add_scalars(g: &mut Graph, terms: &[Var]) -> Var {
    let total = terms.iter().map(|&t| g.value(t).data()[0]).sum();
    let n = terms.len();
    g.push(Tensor::scalar(total), terms, move |_: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        (0..n).map(|_| Some(gr.clone())).collect()
    })
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], geo: &ConvGeom) -> Vec<f64> {
    let ConvGeom { ci, h, w, k, stride, pad, ho, wo } = *geo;
    let p = ho * wo;
    let mut cols = vec![0.0; ci * k * k * p];
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[c * h * w + iy as usize * w..];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], geo: &ConvGeom) -> Vec<f64> {
    let ConvGeom { ci, h, w, k, stride, pad, ho, wo } = *geo;
    let p = ho * wo;
    let mut x = vec![0.0; ci * h * w];
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = c * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `C = A B (+ C when accumulate)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches.
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
            n as isize,
            1,
        );
    }
}

/// 2-D convolution of `x: [Ci, H, W]` with `weight: [Co, Ci, k, k]`, zero
/// padding, optional `bias: [Co]`.
pub fn conv2d(g: &mut Graph, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
    let (ci, h, w) = g.value(x).chw();
    let ws = g.value(weight).shape().to_vec();
    assert_eq!(ws.len(), 4, "conv weight must be [Co, Ci, k, k]");
    assert_eq!(ws[1], ci, "conv input channels {} vs weight {:?}", ci, ws);
    let (co, k) = (ws[0], ws[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let geo = ConvGeom { ci, h, w, k, stride, pad, ho, wo };
    let kk = ci * k * k;
    let p = ho * wo;

    let mut out = vec![0.0; co * p];
    {
        let xv = g.value(x).data();
        let owned;
        let cols: &[f64] = if geo.is_pointwise() {
            xv
        } else {
            owned = im2col(xv, &geo);
            &owned
        };
        gemm(co, kk, p, g.value(weight).data(), (kk, 1), cols, (p, 1), &mut out, false);
    }
    if let Some(b) = bias {
        let bv = g.value(b).data();
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bv[o]);
        }
    }
    let out = Tensor::from_vec(&[co, ho, wo], out);
    let mut parents = vec![x, weight];
    parents.extend(bias);
    g.push(out, &parents, move |inp: &[&Tensor], _: &Tensor, gr: &Tensor, needs: &[bool]| {
        let gout = gr.data();
        let mut grads: Vec<Option<Tensor>> = vec![None; inp.len()];
        let owned;
        let cols: &[f64] = if geo.is_pointwise() {
            inp[0].data()
        } else if needs[1] {
            owned = im2col(inp[0].data(), &geo);
            &owned
        } else {
            &[]
        };
        if needs[1] {
            let mut gw = vec![0.0; co * kk];
            gemm(co, p, kk, gout, (p, 1), cols, (1, p), &mut gw, false);
            grads[1] = Some(Tensor::from_vec(&[co, ci, k, k], gw));
        }
        if needs[0] {
            let mut gcols = vec![0.0; kk * p];
            gemm(kk, co, p, inp[1].data(), (1, kk), gout, (p, 1), &mut gcols, false);
            let gx = if geo.is_pointwise() { gcols } else { col2im(&gcols, &geo) };
            grads[0] = Some(Tensor::from_vec(&[ci, h, w], gx));
        }
        if inp.len() == 3 && needs[2] {
            grads[2] = Some(Tensor::from_vec(&[co], gout.chunks(p).map(|c| c.iter().sum()).collect()));
        }
        grads
    })
}

// ---------------------------------------------------------------------------
// stereo-specific operators

/// Per-pixel L2 normalization over channels: `f / sqrt(|f|^2 + eps)`.
pub fn normalize_channels(g: &mut Graph, a: Var, eps: f64) -> Var {
    let t = g.value(a);
    let (c, h, w) = t.chw();
    let hw = h * w;
    let mut inv = vec![0.0; hw];
    for ch in 0..c {
        for (i, v) in t.channel(ch).iter().enumerate() {
            inv[i] += v * v;
        }
    }
    inv.iter_mut().for_each(|s| *s = 1.0 / libm::sqrt(*s + eps));
    let mut out = t.clone();
    for ch in 0..c {
        out.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().zip(&inv).for_each(|(v, s)| *v *= s);
    }
    g.push(out, &[a], move |inp: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        // d(f_i / n)/df_j = delta_ij / n - f_i f_j / n^3
        let x = inp[0];
        let mut dot = vec![0.0; hw];
        for ch in 0..c {
            for i in 0..hw {
                dot[i] += gr.data()[ch * hw + i] * x.data()[ch * hw + i];
            }
        }
        let mut gx = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for i in 0..hw {
                let n_inv = inv[i];
                let j = ch * hw + i;
                gx.data_mut()[j] = gr.data()[j] * n_inv - x.data()[j] * dot[i] * n_inv * n_inv * n_inv;
            }
        }
        vec![Some(gx)]
    })
}

/// Correlation volume `out[d, y, x] = sum_c l[c, y, x] * r[c, y, x - d]`,
/// zero where `x - d < 0`.
pub fn correlation(g: &mut Graph, left: Var, right: Var, levels: usize) -> Var {
    same_shape(g, left, right);
    let (c, h, w) = g.value(left).chw();
    let hw = h * w;
    let mut out = Tensor::zeros(&[levels, h, w]);
    {
        let (l, r) = (g.value(left).data(), g.value(right).data());
        let o = out.data_mut();
        for ch in 0..c {
            for d in 0..levels.min(w) {
                for y in 0..h {
                    let row = ch * hw + y * w;
                    let orow = d * hw + y * w;
                    for x in d..w {
                        o[orow + x] += l[row + x] * r[row + x - d];
                    }
                }
            }
        }
    }
    g.push(out, &[left, right], move |inp: &[&Tensor], _: &Tensor, gr: &Tensor, needs: &[bool]| {
        let (l, r, go) = (inp[0].data(), inp[1].data(), gr.data());
        let mut gl = needs[0].then(|| Tensor::zeros(&[c, h, w]));
        let mut gr_ = needs[1].then(|| Tensor::zeros(&[c, h, w]));
        for ch in 0..c {
            for d in 0..levels.min(w) {
                for y in 0..h {
                    let row = ch * hw + y * w;
                    let orow = d * hw + y * w;
                    for x in d..w {
                        let gv = go[orow + x];
                        if let Some(t) = gl.as_mut() {
                            t.data_mut()[row + x] += gv * r[row + x - d];
                        }
                        if let Some(t) = gr_.as_mut() {
                            t.data_mut()[row + x - d] += gv * l[row + x];
                        }
                    }
                }
            }
        }
        vec![gl, gr_]
    })
}

/// Average pooling with window 2 along the leading (disparity) axis.
pub fn pool_disparity(g: &mut Graph, cost: Var) -> Var {
    let (d, h, w) = g.value(cost).chw();
    let dp = d / 2;
    assert!(dp >= 1, "need at least two disparity levels to pool");
    let hw = h * w;
    let src = g.value(cost).data();
    let mut out = Tensor::zeros(&[dp, h, w]);
    for j in 0..dp {
        for i in 0..hw {
            out.data_mut()[j * hw + i] = 0.5 * (src[2 * j * hw + i] + src[(2 * j + 1) * hw + i]);
        }
    }
    g.push(out, &[cost], move |_: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        let mut gc = Tensor::zeros(&[d, h, w]);
        for j in 0..dp {
            for i in 0..hw {
                let v = 0.5 * gr.data()[j * hw + i];
                gc.data_mut()[2 * j * hw + i] += v;
                gc.data_mut()[(2 * j + 1) * hw + i] += v;
            }
        }
        vec![Some(gc)]
    })
}

/// Linear sample of a column of length `n` at `pos`, clamped to
/// `[0, n-1]`. Returns `(lo, hi, frac, inside)`; `inside` is false when
/// the clamp is active, in which case the position gets no gradient.
#[inline]
fn interp_taps(pos: f64, n: usize) -> (usize, usize, f64, bool) {
    let top = (n - 1) as f64;
    let inside = pos > 0.0 && pos < top;
    let p = pos.clamp(0.0, top);
    let lo = (libm::floor(p) as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, p - lo as f64, inside)
}

/// Radius of the lookup window along the disparity axis.
pub const LOOKUP_RADIUS: usize = 4;

/// Samples `cost` at `d + r` and `pooled` at `d / 2 + r` for
/// `r = -4..=4`, linear interpolation along the disparity axis.
/// Channels: level 0 with `r` ascending, then level 1.
pub fn lookup(g: &mut Graph, cost: Var, pooled: Var, disp: Var) -> Var {
    let (n0, h, w) = g.value(cost).chw();
    let (n1, _, _) = g.value(pooled).chw();
    let (dc, dh, dw) = g.value(disp).chw();
    assert_eq!((dc, dh, dw), (1, h, w), "lookup disparity must be [1, H, W]");
    let hw = h * w;
    let taps = 2 * LOOKUP_RADIUS + 1;
    let levels = [(n0, 1.0), (n1, 0.5)];
    let mut out = Tensor::zeros(&[2 * taps, h, w]);
    {
        let vols = [g.value(cost).data(), g.value(pooled).data()];
        let dv = g.value(disp).data();
        for (lv, &(n, s)) in levels.iter().enumerate() {
            for (ri, r) in (-(LOOKUP_RADIUS as isize)..=LOOKUP_RADIUS as isize).enumerate() {
                let ch = lv * taps + ri;
                for i in 0..hw {
                    let (lo, hi, f, _) = interp_taps(dv[i] * s + r as f64, n);
                    let v = vols[lv][lo * hw + i] * (1.0 - f) + vols[lv][hi * hw + i] * f;
                    out.data_mut()[ch * hw + i] = v;
                }
            }
        }
    }
    g.push(out, &[cost, pooled, disp], move |inp: &[&Tensor], _: &Tensor, gr: &Tensor, needs: &[bool]| {
        let dv = inp[2].data();
        let mut gvols = [
            needs[0].then(|| Tensor::zeros(&[n0, h, w])),
            needs[1].then(|| Tensor::zeros(&[n1, h, w])),
        ];
        let mut gd = needs[2].then(|| Tensor::zeros(&[1, h, w]));
        for (lv, &(n, s)) in levels.iter().enumerate() {
            let vol = inp[lv].data();
            for (ri, r) in (-(LOOKUP_RADIUS as isize)..=LOOKUP_RADIUS as isize).enumerate() {
                let ch = lv * taps + ri;
                for i in 0..hw {
                    let gv = gr.data()[ch * hw + i];
                    if gv == 0.0 {
                        continue;
                    }
                    let (lo, hi, f, inside) = interp_taps(dv[i] * s + r as f64, n);
                    if let Some(t) = gvols[lv].as_mut() {
                        t.data_mut()[lo * hw + i] += gv * (1.0 - f);
                        t.data_mut()[hi * hw + i] += gv * f;
                    }
                    if let (Some(t), true) = (gd.as_mut(), inside) {
                        t.data_mut()[i] += gv * s * (vol[hi * hw + i] - vol[lo * hw + i]);
                    }
                }
            }
        }
        let [g0, g1] = gvols;
        vec![g0, g1, gd]
    })
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels(g: &mut Graph, a: Var) -> Var {
    let t = g.value(a);
    let (c, h, w) = t.chw();
    let hw = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for i in 0..hw {
        let mx = (0..c).map(|k| t.data()[k * hw + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            let e = libm::exp(t.data()[k * hw + i] - mx);
            out.data_mut()[k * hw + i] = e;
            z += e;
        }
        for k in 0..c {
            out.data_mut()[k * hw + i] /= z;
        }
    }
    g.push(out, &[a], move |_: &[&Tensor], p: &Tensor, gr: &Tensor, _: &[bool]| {
        let mut gx = Tensor::zeros(&[c, h, w]);
        for i in 0..hw {
            let dot: f64 = (0..c).map(|k| p.data()[k * hw + i] * gr.data()[k * hw + i]).sum();
            for k in 0..c {
                let j = k * hw + i;
                gx.data_mut()[j] = p.data()[j] * (gr.data()[j] - dot);
            }
        }
        vec![Some(gx)]
    })
}

/// `sum_d d * softmax_d(cost / temperature)` per pixel; output `[1, H, W]`.
pub fn soft_argmax(g: &mut Graph, cost: Var, temperature: f64) -> Var {
    let (d, h, w) = g.value(cost).chw();
    let scaled = scale(g, cost, 1.0 / temperature);
    let p = softmax_channels(g, scaled);
    let mut weights = Vec::with_capacity(d * h * w);
    for k in 0..d {
        weights.extend(core::iter::repeat_n(k as f64, h * w));
    }
    let hw = h * w;
    let pv = g.value(p).data();
    let mut out = Tensor::zeros(&[1, h, w]);
    for k in 0..d {
        for i in 0..hw {
            out.data_mut()[i] += weights[k * hw + i] * pv[k * hw + i];
        }
    }
    g.push(out, &[p], move |_: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        let mut gp = Tensor::zeros(&[d, h, w]);
        for k in 0..d {
            for i in 0..hw {
                gp.data_mut()[k * hw + i] = gr.data()[i] * k as f64;
            }
        }
        vec![Some(gp)]
    })
}

/// Bilinear resize of every channel to `out_h x out_w` (half-pixel
/// convention, clamped borders).
pub fn resize_bilinear(g: &mut Graph, a: Var, out_h: usize, out_w: usize) -> Var {
    let (c, h, w) = g.value(a).chw();
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        data.extend(math::resample_plane(g.value(a).channel(ch), h, w, &ty, &tx));
    }
    let out = Tensor::from_vec(&[c, out_h, out_w], data);
    g.push(out, &[a], move |_: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        let mut gx = Tensor::zeros(&[c, h, w]);
        let ohw = out_h * out_w;
        for ch in 0..c {
            let dst = &mut gx.data_mut()[ch * h * w..(ch + 1) * h * w];
            math::resample_plane_adjoint(&gr.data()[ch * ohw..(ch + 1) * ohw], dst, w, &ty, &tx);
        }
        vec![Some(gx)]
    })
}

/// `[C * f * f, h, w] -> [C, f h, f w]`:
/// `out[c, y f + i, x f + j] = in[(c f + i) f + j, y, x]`.
pub fn pixel_shuffle(g: &mut Graph, a: Var, f: usize) -> Var {
    let (cin, h, w) = g.value(a).chw();
    assert_eq!(cin % (f * f), 0);
    let c = cin / (f * f);
    let (oh, ow) = (h * f, w * f);
    let index = move |ch: usize, oy: usize, ox: usize| {
        let (y, i, x, j) = (oy / f, oy % f, ox / f, ox % f);
        (((ch * f + i) * f + j) * h + y) * w + x
    };
    let src = g.value(a).data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.data_mut()[(ch * oh + oy) * ow + ox] = src[index(ch, oy, ox)];
            }
        }
    }
    g.push(out, &[a], move |_: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        let mut gx = Tensor::zeros(&[cin, h, w]);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    gx.data_mut()[index(ch, oy, ox)] = gr.data()[(ch * oh + oy) * ow + ox];
                }
            }
        }
        vec![Some(gx)]
    })
}

/// Offsets of the 3x3 neighbourhood in row-major order.
pub const NEIGHBOURS_3X3: [(isize, isize); 9] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Per-pixel convex combination of the 3x3 neighbourhood of `field`
/// (`[1, H, W]`, replicate borders) with weights `[9, H, W]`.
pub fn neighbourhood_combine(g: &mut Graph, field: Var, weights: Var) -> Var {
    let (c, h, w) = g.value(field).chw();
    assert_eq!(c, 1);
    assert_eq!(g.value(weights).shape(), &[9, h, w]);
    let hw = h * w;
    let nb = move |y: usize, x: usize, k: usize| {
        let (dy, dx) = NEIGHBOURS_3X3[k];
        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
        yy * w + xx
    };
    let (fv, wv) = (g.value(field).data(), g.value(weights).data());
    let mut out = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out.data_mut()[i] = (0..9).map(|k| wv[k * hw + i] * fv[nb(y, x, k)]).sum();
        }
    }
    g.push(out, &[field, weights], move |inp: &[&Tensor], _: &Tensor, gr: &Tensor, needs: &[bool]| {
        let (fv, wv) = (inp[0].data(), inp[1].data());
        let mut gf = needs[0].then(|| Tensor::zeros(&[1, h, w]));
        let mut gw = needs[1].then(|| Tensor::zeros(&[9, h, w]));
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let gv = gr.data()[i];
                for k in 0..9 {
                    let j = nb(y, x, k);
                    if let Some(t) = gf.as_mut() {
                        t.data_mut()[j] += gv * wv[k * hw + i];
                    }
                    if let Some(t) = gw.as_mut() {
                        t.data_mut()[k * hw + i] = gv * fv[j];
                    }
                }
            }
        }
        vec![gf, gw]
    })
}

/// Prewitt gradient magnitude of a `[1, H, W]` map, replicate borders.
/// Subgradient 0 where the magnitude is 0.
pub fn prewitt_magnitude(g: &mut Graph, a: Var) -> Var {
    let (c, h, w) = g.value(a).chw();
    assert_eq!(c, 1);
    assert!(h >= 3 && w >= 3, "Prewitt needs at least 3x3");
    let (gx, gy) = math::prewitt_components(g.value(a).data(), h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| libm::sqrt(a * a + b * b)).collect();
    let out = Tensor::from_vec(&[1, h, w], mag);
    g.push(out, &[a], move |_: &[&Tensor], out: &Tensor, gr: &Tensor, _: &[bool]| {
        let mut gin = Tensor::zeros(&[1, h, w]);
        let d = gin.data_mut();
        for y in 0..h {
            let ys = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
            for x in 0..w {
                let i = y * w + x;
                let m = out.data()[i];
                if m == 0.0 {
                    continue;
                }
                let (sx, sy) = (gr.data()[i] * gx[i] / m, gr.data()[i] * gy[i] / m);
                let xs = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
                for k in 0..3 {
                    d[ys[k] * w + xs[2]] += sx;
                    d[ys[k] * w + xs[0]] -= sx;
                    d[ys[2] * w + xs[k]] += sy;
                    d[ys[0] * w + xs[k]] -= sy;
                }
            }
        }
        vec![Some(gin)]
    })
}

/// Top-left `h x w` window of a `[C, H, W]` tensor.
pub fn crop(g: &mut Graph, a: Var, h: usize, w: usize) -> Var {
    crop_at(g, a, 0, 0, h, w)
}

/// `h x w` window of a `[C, H, W]` tensor starting at row `y0`, column `x0`.
pub fn crop_at(g: &mut Graph, a: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
    let (c, ih, iw) = g.value(a).chw();
    assert!(y0 + h <= ih && x0 + w <= iw);
    if (y0, x0, h, w) == (0, 0, ih, iw) {
        return a;
    }
    let src = g.value(a).data();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            let s = (ch * ih + y0 + y) * iw + x0;
            out.data_mut()[(ch * h + y) * w..(ch * h + y + 1) * w].copy_from_slice(&src[s..s + w]);
        }
    }
    g.push(out, &[a], move |_: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        let mut gx = Tensor::zeros(&[c, ih, iw]);
        for ch in 0..c {
            for y in 0..h {
                let s = (ch * ih + y0 + y) * iw + x0;
                gx.data_mut()[s..s + w].copy_from_slice(&gr.data()[(ch * h + y) * w..(ch * h + y + 1) * w]);
            }
        }
        vec![Some(gx)]
    })
}

/// Pads every side of a `[C, H, W]` tensor by `p` copies of the border.
pub fn pad_replicate(g: &mut Graph, a: Var, p: usize) -> Var {
    let (c, h, w) = g.value(a).chw();
    if p == 0 {
        return a;
    }
    let (oh, ow) = (h + 2 * p, w + 2 * p);
    let src_of = move |y: usize, x: usize| (y.saturating_sub(p).min(h - 1), x.saturating_sub(p).min(w - 1));
    let src = g.value(a);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = src_of(y, x);
                out.set(ch, y, x, src.at(ch, sy, sx));
            }
        }
    }
    g.push(out, &[a], move |_: &[&Tensor], _: &Tensor, gr: &Tensor, _: &[bool]| {
        let mut gx = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = src_of(y, x);
                    let v = gx.at(ch, sy, sx) + gr.at(ch, y, x);
                    gx.set(ch, sy, sx, v);
                }
            }
        }
        vec![Some(gx)]
    })
}

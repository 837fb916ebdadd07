// Raw numeric kernels over flat row-major buffers. Shapes are validated by callers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// Below this many multiply-adds the rayon split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 16;

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let at = transpose(a, k, m);
    matmul(&at, b, m, k, n)
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

pub fn log_softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in v.iter_mut() {
        *x -= lse;
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` laid against `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + nd - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
pub fn for_each_broadcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }
}

impl std::str::FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(Error::Config(format!("unknown padding `{other}`"))),
        }
    }
}

/// Geometry of a stride-1 cross-correlation.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub f: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], padding: Padding) -> Result<Self> {
        let (&[n, h, w, c], &[kh, kw, kc, f]) = (x, k) else {
            return Err(Error::dim(format!(
                "conv2d expects x [N,H,L,C] and kernel [h,l,C,F], got {x:?} and {k:?}"
            )));
        };
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {x:?}, kernel {k:?}"
            )));
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => (h, w, (kh.saturating_sub(1)) / 2, (kw.saturating_sub(1)) / 2),
            Padding::Valid => {
                if kh > h || kw > w || kh == 0 || kw == 0 {
                    return Err(Error::dim(format!(
                        "kernel {k:?} larger than input {x:?} under valid padding"
                    )));
                }
                (h - kh + 1, w - kw + 1, 0, 0)
            }
        };
        if kh == 0 || kw == 0 || kh > h + kh - 1 {
            return Err(Error::dim(format!("degenerate kernel {k:?}")));
        }
        Ok(ConvGeom {
            n,
            h,
            w,
            c,
            kh,
            kw,
            f,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.oh, self.ow, self.f]
    }

    fn src(&self, oi: usize, di: usize, oj: usize, dj: usize) -> Option<(usize, usize)> {
        let ii = (oi + di).checked_sub(self.pad_top)?;
        let jj = (oj + dj).checked_sub(self.pad_left)?;
        (ii < self.h && jj < self.w).then_some((ii, jj))
    }
}

pub fn conv2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let per_out = g.oh * g.ow * g.f;
    let per_in = g.h * g.w * g.c;
    let mut out = vec![0.0; g.n * per_out];
    out.par_chunks_mut(per_out.max(1))
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x[n * per_in..(n + 1) * per_in];
            for oi in 0..g.oh {
                for oj in 0..g.ow {
                    let o = &mut out_n[(oi * g.ow + oj) * g.f..(oi * g.ow + oj + 1) * g.f];
                    for di in 0..g.kh {
                        for dj in 0..g.kw {
                            let Some((ii, jj)) = g.src(oi, di, oj, dj) else {
                                continue;
                            };
                            let xs = &x_n[(ii * g.w + jj) * g.c..(ii * g.w + jj + 1) * g.c];
                            for (ci, &xv) in xs.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let kb = ((di * g.kw + dj) * g.c + ci) * g.f;
                                for (ov, &kv) in o.iter_mut().zip(&k[kb..kb + g.f]) {
                                    *ov += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradients of `conv2d` with respect to input and kernel.
pub fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let per_out = g.oh * g.ow * g.f;
    let per_in = g.h * g.w * g.c;
    let klen = g.kh * g.kw * g.c * g.f;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * per_in..(n + 1) * per_in];
            let d_n = &dout[n * per_out..(n + 1) * per_out];
            let mut dx = if want_dx { vec![0.0; per_in] } else { Vec::new() };
            let mut dk = if want_dk { vec![0.0; klen] } else { Vec::new() };
            for oi in 0..g.oh {
                for oj in 0..g.ow {
                    let d = &d_n[(oi * g.ow + oj) * g.f..(oi * g.ow + oj + 1) * g.f];
                    for di in 0..g.kh {
                        for dj in 0..g.kw {
                            let Some((ii, jj)) = g.src(oi, di, oj, dj) else {
                                continue;
                            };
                            let base = (ii * g.w + jj) * g.c;
                            for ci in 0..g.c {
                                let kb = ((di * g.kw + dj) * g.c + ci) * g.f;
                                if want_dx {
                                    dx[base + ci] += d
                                        .iter()
                                        .zip(&k[kb..kb + g.f])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                }
                                if want_dk {
                                    let xv = x_n[base + ci];
                                    for (dkv, &dv) in dk[kb..kb + g.f].iter_mut().zip(d) {
                                        *dkv += xv * dv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (dx, dk)
        })
        .collect();
    let dx = want_dx.then(|| partials.iter().flat_map(|(dx, _)| dx.iter().copied()).collect());
    let dk = want_dk.then(|| {
        let mut acc = vec![0.0; klen];
        for (_, dk) in &partials {
            for (a, v) in acc.iter_mut().zip(dk) {
                *a += v;
            }
        }
        acc
    });
    (dx, dk)
}

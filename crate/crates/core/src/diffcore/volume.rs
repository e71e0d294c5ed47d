//! Channel-first volumetric operations on `[C×D×H×W]` tensors.

use super::linear::gemm;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type Dims3 = [usize; 3];

fn volume_dims(t: &Tensor, op: &str) -> Result<(usize, Dims3)> {
    if t.rank() != 4 {
        return Err(Error::dim(format!("{op} expects [C×D×H×W], got {:?}", t.shape())));
    }
    let s = t.shape();
    Ok((s[0], [s[1], s[2], s[3]]))
}

fn shape4(c: usize, d: Dims3) -> Vec<usize> {
    vec![c, d[0], d[1], d[2]]
}

/// Source row of output row `i` for tap offset `d ∈ {0, 1, 2}`, if inside.
fn tap_src(i: usize, d: usize, n: usize) -> Option<usize> {
    let s = i + d;
    (s >= 1 && s <= n).then(|| s - 1)
}

/// `out[c, p] = x[c, p + offset(tap)]` with zero padding 1.
fn shift_tap(x: &[f64], c: usize, [nd, nh, nw]: Dims3, tap: usize, out: &mut [f64]) {
    let v = nd * nh * nw;
    if v == 0 {
        return;
    }
    let (dz, dy, dx) = (tap / 9, (tap / 3) % 3, tap % 3);
    for ci in 0..c {
        let (src, dst) = (&x[ci * v..(ci + 1) * v], &mut out[ci * v..(ci + 1) * v]);
        for z in 0..nd {
            for y in 0..nh {
                let row = &mut dst[(z * nh + y) * nw..(z * nh + y + 1) * nw];
                let (Some(sz), Some(sy)) = (tap_src(z, dz, nd), tap_src(y, dy, nh)) else {
                    row.fill(0.0);
                    continue;
                };
                let s = &src[(sz * nh + sy) * nw..(sz * nh + sy + 1) * nw];
                match dx {
                    0 => {
                        row[0] = 0.0;
                        row[1..].copy_from_slice(&s[..nw - 1]);
                    }
                    1 => row.copy_from_slice(s),
                    _ => {
                        row[..nw - 1].copy_from_slice(&s[1..]);
                        row[nw - 1] = 0.0;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`shift_tap`]: `acc[c, p + offset(tap)] += t[c, p]`.
fn unshift_tap_add(t: &[f64], c: usize, [nd, nh, nw]: Dims3, tap: usize, acc: &mut [f64]) {
    let v = nd * nh * nw;
    if v == 0 {
        return;
    }
    let (dz, dy, dx) = (tap / 9, (tap / 3) % 3, tap % 3);
    for ci in 0..c {
        let (src, dst) = (&t[ci * v..(ci + 1) * v], &mut acc[ci * v..(ci + 1) * v]);
        for z in 0..nd {
            for y in 0..nh {
                let (Some(sz), Some(sy)) = (tap_src(z, dz, nd), tap_src(y, dy, nh)) else { continue };
                let row = &src[(z * nh + y) * nw..(z * nh + y + 1) * nw];
                let d = &mut dst[(sz * nh + sy) * nw..(sz * nh + sy + 1) * nw];
                let (r, dd) = match dx {
                    0 => (&row[1..], &mut d[..nw - 1]),
                    1 => (row, &mut d[..]),
                    _ => (&row[..nw - 1], &mut d[1..]),
                };
                dd.iter_mut().zip(r).for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Per-axis source taps `(i0, i1, w1)` of an align-corners linear resampling.
pub(crate) fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|j| {
            if n_in == 1 {
                return (0, 0, 0.0);
            }
            let pos = if n_out == 1 {
                (n_in - 1) as f64 / 2.0
            } else {
                j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let i0 = (pos.floor() as usize).min(n_in - 2);
            (i0, i0 + 1, pos - i0 as f64)
        })
        .collect()
}

impl Tape {
    /// 3×3×3 cross-correlation with zero padding 1.
    pub fn conv3d(&self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(k), self.value(b));
        let (ci, dims) = volume_dims(&tx, "conv3d")?;
        let ks = tk.shape();
        if ks.len() != 5 || ks[1] != ci || ks[2..] != [3, 3, 3] {
            return Err(Error::dim(format!(
                "conv3d: kernel {ks:?} does not fit input with {ci} channels"
            )));
        }
        let co = ks[0];
        if tb.shape() != [co] {
            return Err(Error::dim(format!("conv3d: bias {:?} for {co} output channels", tb.shape())));
        }
        let v = dims.iter().product::<usize>();
        let kk = ci * 27;
        let mut out = vec![0.0; co * v];
        for (o, row) in out.chunks_mut(v).enumerate() {
            row.fill(tb.data()[o]);
        }
        // One GEMM per tap against the strided kernel slice `k[:, :, tap]`.
        let mut buf = vec![0.0; ci * v];
        let taps = if co * kk * v == 0 { 0 } else { 27 };
        for tap in 0..taps {
            shift_tap(tx.data(), ci, dims, tap, &mut buf);
            gemm(co, ci, v, 1.0, &tk.data()[tap..], (kk, 27), &buf, (v, 1), 1.0, &mut out, (v, 1));
        }
        drop(buf);
        let out = Tensor::new(shape4(co, dims), out)?;
        self.record1("conv3d", &[x, k, b], out, move |g, need| {
            let g = g[0].data();
            let mut buf = vec![0.0; ci * v];
            let gx = need[0].then(|| {
                let mut gx = vec![0.0; ci * v];
                for tap in 0..taps {
                    gemm(ci, co, v, 1.0, &tk.data()[tap..], (27, kk), g, (v, 1), 0.0, &mut buf, (v, 1));
                    unshift_tap_add(&buf, ci, dims, tap, &mut gx);
                }
                Tensor::new(shape4(ci, dims), gx).expect("conv gx")
            });
            let gk = need[1].then(|| {
                let mut d = vec![0.0; co * kk];
                for tap in 0..taps {
                    shift_tap(tx.data(), ci, dims, tap, &mut buf);
                    gemm(co, v, ci, 1.0, g, (v, 1), &buf, (1, v), 0.0, &mut d[tap..], (kk, 27));
                }
                Tensor::new(vec![co, ci, 3, 3, 3], d).expect("conv gk")
            });
            let gb = need[2].then(|| {
                Tensor::new(vec![co], g.chunks(v.max(1)).map(|r| r.iter().sum()).collect()).expect("conv gb")
            });
            vec![gx, gk, gb]
        })
    }

    /// Per-channel standardisation with biased variance.
    pub fn instance_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (c, dims) = volume_dims(&tx, "instance_norm")?;
        let v = dims.iter().product::<usize>();
        let mut out = vec![0.0; c * v];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let xs = &tx.data()[ch * v..(ch + 1) * v];
            let mean = xs.iter().sum::<f64>() / v as f64;
            // one correction pass makes the mean of a constant channel exact
            let mean = mean + xs.iter().map(|a| a - mean).sum::<f64>() / v as f64;
            let var = xs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / v as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for (o, a) in out[ch * v..(ch + 1) * v].iter_mut().zip(xs) {
                *o = (a - mean) * is;
            }
        }
        let y = Tensor::new(shape4(c, dims), out)?;
        let yc = y.clone();
        self.record1("instance_norm", &[x], y, move |g, _| {
            let mut gx = vec![0.0; c * v];
            for ch in 0..c {
                let gs = &g[0].data()[ch * v..(ch + 1) * v];
                let ys = &yc.data()[ch * v..(ch + 1) * v];
                let mg = gs.iter().sum::<f64>() / v as f64;
                let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / v as f64;
                for ((o, &gi), &yi) in gx[ch * v..(ch + 1) * v].iter_mut().zip(gs).zip(ys) {
                    *o = inv_std[ch] * (gi - mg - yi * mgy);
                }
            }
            vec![Some(Tensor::new(shape4(c, dims), gx).expect("in grad"))]
        })
    }

    /// 2×2×2 max pooling with stride 2; extents must be even.
    pub fn max_pool3d(&self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (c, [nd, nh, nw]) = volume_dims(&tx, "max_pool3d")?;
        if nd % 2 != 0 || nh % 2 != 0 || nw % 2 != 0 {
            return Err(Error::dim(format!("max_pool3d needs even extents, got {:?}", tx.shape())));
        }
        let od = [nd / 2, nh / 2, nw / 2];
        let ov = od.iter().product::<usize>();
        let mut out = vec![0.0; c * ov];
        let mut arg = vec![0usize; c * ov];
        let src = tx.data();
        for ch in 0..c {
            for z in 0..od[0] {
                for y in 0..od[1] {
                    for xx in 0..od[2] {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for t in 0..8 {
                            let (a, b, cc) = (2 * z + t / 4, 2 * y + (t / 2) % 2, 2 * xx + t % 2);
                            let i = ((ch * nd + a) * nh + b) * nw + cc;
                            if src[i] > best {
                                best = src[i];
                                bi = i;
                            }
                        }
                        let o = ((ch * od[0] + z) * od[1] + y) * od[2] + xx;
                        out[o] = best;
                        arg[o] = bi;
                    }
                }
            }
        }
        let n_in = tx.numel();
        let in_shape = tx.shape().to_vec();
        let out = Tensor::new(shape4(c, od), out)?;
        self.record1("max_pool3d", &[x], out, move |g, _| {
            let mut gx = vec![0.0; n_in];
            for (o, &i) in arg.iter().enumerate() {
                gx[i] += g[0].data()[o];
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).expect("pool grad"))]
        })
    }

    /// Trilinear resampling onto a lattice of `out` voxels spanning the same
    /// extent, corner voxels aligned.
    pub fn resample_trilinear(&self, x: Var, out: Dims3) -> Result<Var> {
        let tx = self.value(x);
        let (c, dims) = volume_dims(&tx, "resample_trilinear")?;
        if out.iter().any(|&n| n == 0) {
            return Err(Error::dim("resample_trilinear: empty target"));
        }
        let taps = [axis_taps(dims[0], out[0]), axis_taps(dims[1], out[1]), axis_taps(dims[2], out[2])];
        let [nd, nh, nw] = dims;
        let ov = out.iter().product::<usize>();
        let iv = nd * nh * nw;
        let corners = move |z: usize, y: usize, xx: usize| {
            let (tz, ty, tx) = (taps[0][z], taps[1][y], taps[2][xx]);
            let mut w = [(0usize, 0.0f64); 8];
            for (t, slot) in w.iter_mut().enumerate() {
                let (a, wa) = if t & 4 == 0 { (tz.0, 1.0 - tz.2) } else { (tz.1, tz.2) };
                let (b, wb) = if t & 2 == 0 { (ty.0, 1.0 - ty.2) } else { (ty.1, ty.2) };
                let (cc, wc) = if t & 1 == 0 { (tx.0, 1.0 - tx.2) } else { (tx.1, tx.2) };
                *slot = ((a * nh + b) * nw + cc, wa * wb * wc);
            }
            w
        };
        let mut data = vec![0.0; c * ov];
        let src = tx.data();
        for z in 0..out[0] {
            for y in 0..out[1] {
                for xx in 0..out[2] {
                    let w = corners(z, y, xx);
                    let o = (z * out[1] + y) * out[2] + xx;
                    for ch in 0..c {
                        let base = ch * iv;
                        data[ch * ov + o] = w.iter().map(|&(i, wt)| wt * src[base + i]).sum();
                    }
                }
            }
        }
        let in_shape = tx.shape().to_vec();
        let res = Tensor::new(shape4(c, out), data)?;
        self.record1("resample_trilinear", &[x], res, move |g, _| {
            let mut gx = vec![0.0; c * iv];
            let gd = g[0].data();
            for z in 0..out[0] {
                for y in 0..out[1] {
                    for xx in 0..out[2] {
                        let w = corners(z, y, xx);
                        let o = (z * out[1] + y) * out[2] + xx;
                        for ch in 0..c {
                            let u = gd[ch * ov + o];
                            for &(i, wt) in &w {
                                gx[ch * iv + i] += wt * u;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).expect("resample grad"))]
        })
    }

    /// Zero-pad at the high end of each spatial axis up to `to`.
    pub fn pad_end(&self, x: Var, to: Dims3) -> Result<Var> {
        let tx = self.value(x);
        let (c, dims) = volume_dims(&tx, "pad_end")?;
        if dims.iter().zip(&to).any(|(a, b)| a > b) {
            return Err(Error::dim(format!("pad_end: {dims:?} larger than {to:?}")));
        }
        let out = Tensor::new(shape4(c, to), copy_block(tx.data(), c, dims, to, dims))?;
        self.record1("pad_end", &[x], out, move |g, _| {
            vec![Some(Tensor::new(shape4(c, dims), copy_block(g[0].data(), c, to, dims, dims)).expect("pad grad"))]
        })
    }

    /// Keep the leading `to` block of each spatial axis.
    pub fn crop(&self, x: Var, to: Dims3) -> Result<Var> {
        let tx = self.value(x);
        let (c, dims) = volume_dims(&tx, "crop")?;
        if dims.iter().zip(&to).any(|(a, b)| a < b) {
            return Err(Error::dim(format!("crop: {dims:?} smaller than {to:?}")));
        }
        let out = Tensor::new(shape4(c, to), copy_block(tx.data(), c, dims, to, to))?;
        self.record1("crop", &[x], out, move |g, _| {
            vec![Some(Tensor::new(shape4(c, dims), copy_block(g[0].data(), c, to, dims, to)).expect("crop grad"))]
        })
    }
}

/// Copy the leading `block` region from a `from`-shaped volume into a zeroed `to`-shaped one.
fn copy_block(src: &[f64], c: usize, from: Dims3, to: Dims3, block: Dims3) -> Vec<f64> {
    let fv = from.iter().product::<usize>();
    let tv = to.iter().product::<usize>();
    let mut out = vec![0.0; c * tv];
    for ch in 0..c {
        for z in 0..block[0] {
            for y in 0..block[1] {
                let s = ch * fv + (z * from[1] + y) * from[2];
                let d = ch * tv + (z * to[1] + y) * to[2];
                out[d..d + block[2]].copy_from_slice(&src[s..s + block[2]]);
            }
        }
    }
    out
}

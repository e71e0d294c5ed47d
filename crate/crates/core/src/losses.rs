//! Training objectives and their weighted total.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::renderer::RaySamples;

/// Clamp applied to per-sample weights before the binary entropy.
pub const ENTROPY_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// point colour
    pub w1: f64,
    /// background entropy
    pub w2: f64,
    /// flow L1
    pub w3: f64,
    /// inpaint deviation
    pub w4: f64,
    /// density TV
    pub w5: f64,
    /// flow TV
    pub w6: f64,
    /// depth TV
    pub w7: f64,
}

impl LossWeights {
    pub fn coarse() -> Self {
        LossWeights { w1: 1e-1, w2: 1e-2, w3: 1e-5, w4: 0.0, w5: 1e-6, w6: 1e-3, w7: 1e-1 }
    }

    pub fn fine() -> Self {
        LossWeights { w1: 1e-2, w2: 1e-3, w3: 1e-5, w4: 1e-5, w5: 1e-6, w6: 1e-3, w7: 1e-1 }
    }

    pub fn zero() -> Self {
        LossWeights { w1: 0.0, w2: 0.0, w3: 0.0, w4: 0.0, w5: 0.0, w6: 0.0, w7: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w1, self.w2, self.w3, self.w4, self.w5, self.w6, self.w7];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {all:?}")));
        }
        Ok(())
    }
}

fn check_rows(tape: &Tape, c: Var, gt: &Tensor, what: &str) -> Result<usize> {
    let s = tape.shape(c);
    if s.len() != 2 || s[1] != 3 || gt.shape() != s.as_slice() {
        return Err(Error::dim(format!("{what}: colours {s:?} vs ground truth {:?}", gt.shape())));
    }
    if s[0] == 0 {
        return Err(Error::Domain(format!("{what}: empty ray batch")));
    }
    Ok(s[0])
}

/// `Σ_paths mean_r ‖C(r) − C_gt(r)‖²` over `[R×3]` colours.
pub fn photometric(tape: &Tape, paths: &[Var], gt: &Tensor) -> Result<Var> {
    let mut terms = Vec::with_capacity(paths.len());
    for &c in paths {
        let r = check_rows(tape, c, gt, "photometric")?;
        let g = tape.constant(gt.clone());
        let d = tape.sub(c, g)?;
        let sq = tape.square(d)?;
        let s = tape.sum(sq)?;
        terms.push((s, 1.0 / r as f64));
    }
    tape.weighted_sum(&terms)
}

/// Per ray `(1/K) Σ_k w_k ‖c_k − C_gt‖²`, averaged over rays.
pub fn point_color_loss(tape: &Tape, weights: Var, colors: Var, samples: &RaySamples, gt: &Tensor) -> Result<Var> {
    let (tw, tc) = (tape.value(weights), tape.value(colors));
    let n = samples.len();
    let r = samples.ray_count();
    if tw.numel() != n || tc.shape() != [n, 3] || gt.shape() != [r, 3] {
        return Err(Error::dim(format!("point_color_loss: weights {:?}, colours {:?}, gt {:?}", tw.shape(), tc.shape(), gt.shape())));
    }
    if r == 0 {
        return Err(Error::Domain("point_color_loss: empty ray batch".into()));
    }
    let ray_of = samples.ray_of_sample();
    let inv_k: Vec<f64> = (0..r).map(|i| 1.0 / (samples.offsets[i + 1] - samples.offsets[i]).max(1) as f64).collect();
    let mut total = 0.0;
    let mut err = vec![0.0; n];
    for k in 0..n {
        let ray = ray_of[k];
        err[k] = (0..3).map(|ch| (tc.data()[3 * k + ch] - gt.data()[3 * ray + ch]).powi(2)).sum();
        total += inv_k[ray] * tw.data()[k] * err[k];
    }
    let scale = 1.0 / r as f64;
    let gt = gt.clone();
    tape.record1("point_color", &[weights, colors], Tensor::scalar(total * scale), move |g, need| {
        let u = g[0].item() * scale;
        let gw = need[0].then(|| Tensor::from_fn([n], |k| u * inv_k[ray_of[k]] * err[k]));
        let gc = need[1].then(|| {
            Tensor::from_fn([n, 3], |i| {
                let (k, ch) = (i / 3, i % 3);
                let ray = ray_of[k];
                u * inv_k[ray] * tw.data()[k] * 2.0 * (tc.data()[i] - gt.data()[3 * ray + ch])
            })
        });
        vec![gw, gc]
    })
}

/// Per ray mean binary entropy of the first `K − 1` sample weights, averaged
/// over rays. Weights are clamped to `[ε, 1 − ε]`.
pub fn background_entropy(tape: &Tape, weights: Var, samples: &RaySamples) -> Result<Var> {
    let tw = tape.value(weights);
    let n = samples.len();
    let r = samples.ray_count();
    if tw.numel() != n {
        return Err(Error::dim(format!("background_entropy: {} weights for {n} samples", tw.numel())));
    }
    if r == 0 {
        return Err(Error::Domain("background_entropy: empty ray batch".into()));
    }
    let mut coef = vec![0.0; n];
    for ray in 0..r {
        let (a, b) = (samples.offsets[ray], samples.offsets[ray + 1]);
        if b - a >= 2 {
            coef[a..b - 1].iter_mut().for_each(|c| *c = 1.0 / ((b - a - 1) * r) as f64);
        }
    }
    let mut total = 0.0;
    for k in 0..n {
        if coef[k] > 0.0 {
            let a = tw.data()[k].clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS);
            total -= coef[k] * (a * a.ln() + (1.0 - a) * (1.0 - a).ln());
        }
    }
    tape.record1("background_entropy", &[weights], Tensor::scalar(total), move |g, _| {
        let u = g[0].item();
        let grad = Tensor::from_fn([n], |k| {
            let w = tw.data()[k];
            if coef[k] == 0.0 || w < ENTROPY_EPS || w > 1.0 - ENTROPY_EPS {
                0.0
            } else {
                u * coef[k] * ((1.0 - w) / w).ln()
            }
        });
        vec![Some(grad)]
    })
}

/// Mean absolute flow component.
pub fn flow_l1(tape: &Tape, flow: Var) -> Result<Var> {
    let a = tape.abs(flow)?;
    tape.mean(a)
}

/// Mean absolute difference between the inpainted and plain upsampled grids.
pub fn vdiff(tape: &Tape, inp: Var, up: Var) -> Result<Var> {
    let d = tape.sub(inp, up)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Squared forward differences of a `[C×Nx×Ny×Nz]` grid: mean per axis,
/// then averaged over the axes that have at least two voxels.
pub fn tv_grid(tape: &Tape, grid: Var) -> Result<Var> {
    let tg = tape.value(grid);
    if tg.rank() != 4 {
        return Err(Error::dim(format!("tv_grid expects [C×Nx×Ny×Nz], got {:?}", tg.shape())));
    }
    let s = tg.shape().to_vec();
    let strides = [s[2] * s[3], s[3], 1];
    let axes: Vec<usize> = (0..3).filter(|&a| s[a + 1] > 1).collect();
    let mut coef = [0.0; 3];
    for &a in &axes {
        let pairs = s[0] * (s[a + 1] - 1) * s[1..].iter().product::<usize>() / s[a + 1];
        coef[a] = 1.0 / (pairs * axes.len()) as f64;
    }
    let v: usize = s[1..].iter().product();
    let pairs_of = move |a: usize, f: &mut dyn FnMut(usize, usize)| {
        for ch in 0..s[0] {
            for x in 0..s[1] {
                for y in 0..s[2] {
                    for z in 0..s[3] {
                        let idx = [x, y, z];
                        if idx[a] + 1 < s[a + 1] {
                            let i = ch * v + (x * s[2] + y) * s[3] + z;
                            f(i, i + strides[a]);
                        }
                    }
                }
            }
        }
    };
    let d = tg.data();
    let mut total = 0.0;
    for &a in &axes {
        let mut sum = 0.0;
        pairs_of(a, &mut |i, j| sum += (d[j] - d[i]).powi(2));
        total += coef[a] * sum;
    }
    let shape = tg.shape().to_vec();
    tape.record1("tv_grid", &[grid], Tensor::scalar(total), move |g, _| {
        let u = g[0].item();
        let d = tg.data();
        let mut gg = vec![0.0; tg.numel()];
        for &a in &axes {
            pairs_of(a, &mut |i, j| {
                let t = 2.0 * u * coef[a] * (d[j] - d[i]);
                gg[j] += t;
                gg[i] -= t;
            });
        }
        vec![Some(Tensor::new(shape.clone(), gg).expect("tv grad"))]
    })
}

/// Mean squared difference over all horizontal and vertical neighbour pairs
/// of a row-major `height×width` depth patch.
pub fn depth_tv(tape: &Tape, depth: Var, height: usize, width: usize) -> Result<Var> {
    let td = tape.value(depth);
    if td.numel() != height * width {
        return Err(Error::dim(format!("depth_tv: {} values for {height}×{width}", td.numel())));
    }
    let mut pairs = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width {
                pairs.push((i, i + 1));
            }
            if y + 1 < height {
                pairs.push((i, i + width));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Domain("depth_tv needs at least two pixels".into()));
    }
    let scale = 1.0 / pairs.len() as f64;
    let total = scale * pairs.iter().map(|&(i, j)| (td.data()[j] - td.data()[i]).powi(2)).sum::<f64>();
    let shape = td.shape().to_vec();
    tape.record1("depth_tv", &[depth], Tensor::scalar(total), move |g, _| {
        let u = g[0].item();
        let mut gd = vec![0.0; td.numel()];
        for &(i, j) in &pairs {
            let t = 2.0 * u * scale * (td.data()[j] - td.data()[i]);
            gd[j] += t;
            gd[i] -= t;
        }
        vec![Some(Tensor::new(shape.clone(), gd).expect("depth tv grad"))]
    })
}

/// Loss terms of one iteration; absent terms count as zero.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub photo: Option<Var>,
    pub ptc: Option<Var>,
    pub bg: Option<Var>,
    pub flow: Option<Var>,
    pub vdiff: Option<Var>,
    pub tv_sigma: Option<Var>,
    pub tv_flow: Option<Var>,
    pub tv_depth: Option<Var>,
}

/// Unweighted term values and the weighted total of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub photo: f64,
    pub ptc: f64,
    pub bg: f64,
    pub flow: f64,
    pub vdiff: f64,
    pub tv_sigma: f64,
    pub tv_flow: f64,
    pub tv_depth: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "photo,ptc,bg,flow,vdiff,tv_sigma,tv_flow,tv_depth,total";

    pub fn csv_fields(&self) -> String {
        let v = [self.photo, self.ptc, self.bg, self.flow, self.vdiff, self.tv_sigma, self.tv_flow, self.tv_depth, self.total];
        v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",")
    }

    /// `photo + Σ w_i·term_i`
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.photo
            + w.w1 * self.ptc
            + w.w2 * self.bg
            + w.w3 * self.flow
            + w.w4 * self.vdiff
            + w.w5 * self.tv_sigma
            + w.w6 * self.tv_flow
            + w.w7 * self.tv_depth
    }
}

/// Weighted total of all present terms.
pub fn total_loss(tape: &Tape, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossReport)> {
    w.validate()?;
    let photo = terms.photo.ok_or_else(|| Error::Domain("total_loss needs the photometric term".into()))?;
    let value = |v: Option<Var>| v.map(|v| tape.value(v).item()).unwrap_or(0.0);
    let mut report = LossReport {
        photo: value(terms.photo),
        ptc: value(terms.ptc),
        bg: value(terms.bg),
        flow: value(terms.flow),
        vdiff: value(terms.vdiff),
        tv_sigma: value(terms.tv_sigma),
        tv_flow: value(terms.tv_flow),
        tv_depth: value(terms.tv_depth),
        total: 0.0,
    };
    let weighted = [
        (terms.ptc, w.w1),
        (terms.bg, w.w2),
        (terms.flow, w.w3),
        (terms.vdiff, w.w4),
        (terms.tv_sigma, w.w5),
        (terms.tv_flow, w.w6),
        (terms.tv_depth, w.w7),
    ];
    let mut parts = vec![(photo, 1.0)];
    parts.extend(weighted.iter().filter_map(|&(v, wt)| v.map(|v| (v, wt))));
    let total = tape.weighted_sum(&parts)?;
    report.total = tape.value(total).item();
    Ok((total, report))
}

//! Forward warping by average splatting.
//!
//! Every source voxel `q` is pushed to `q + flow[q]` (voxel-index units) and
//! spread over the eight surrounding lattice points with a trilinear kernel.
//! Each target keeps the kernel-weighted sum of its contributors divided by
//! the summed kernel weight. Targets with no weight become holes.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::{Bbox, CanonicalRadianceField, VoxelGrid};
use crate::trajectory::FlowGrid;

pub const MASS_EPS: f64 = 1e-8;

/// `b(u) = Π max(0, 1 − |u_i|)`
pub fn trilinear_weight(u: [f64; 3]) -> f64 {
    u.iter().map(|x| (1.0 - x.abs()).max(0.0)).product()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpedField {
    /// `[C×Nx×Ny×Nz]`, exactly zero at holes.
    pub values: Tensor,
    /// `[1×Nx×Ny×Nz]` summed kernel weight.
    pub mass: Tensor,
    pub hole_mask: Vec<bool>,
}

impl WarpedField {
    pub fn hole_count(&self) -> usize {
        self.hole_mask.iter().filter(|&&h| h).count()
    }
}

/// Tape handles of a differentiable splat.
#[derive(Clone, Debug)]
pub struct SplatVars {
    pub values: Var,
    pub mass: Var,
    pub hole_mask: Vec<bool>,
}

/// One source voxel's landing cell: lower corner and fractional offsets.
#[derive(Clone, Copy)]
struct Landing {
    base: [i64; 3],
    frac: [f64; 3],
}

fn landing(q: [usize; 3], f: [f64; 3]) -> Landing {
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let y = q[a] as f64 + f[a];
        let fl = y.floor();
        base[a] = fl as i64;
        frac[a] = y - fl;
    }
    Landing { base, frac }
}

/// Corner `k` (bit 2 = x, bit 1 = y, bit 0 = z): flat target index if in bounds,
/// its kernel weight and the weight's gradient w.r.t. the landing position.
fn corner(l: &Landing, k: usize, res: [usize; 3]) -> Option<(usize, f64, [f64; 3])> {
    let mut idx = [0usize; 3];
    let mut fac = [0.0; 3];
    let mut dfac = [0.0; 3];
    for a in 0..3 {
        let hi = (k >> (2 - a)) & 1 == 1;
        let p = l.base[a] + hi as i64;
        if p < 0 || p >= res[a] as i64 {
            return None;
        }
        idx[a] = p as usize;
        if hi {
            fac[a] = l.frac[a];
            dfac[a] = 1.0;
        } else {
            fac[a] = 1.0 - l.frac[a];
            dfac[a] = -1.0;
        }
    }
    let w = fac[0] * fac[1] * fac[2];
    let dw = [dfac[0] * fac[1] * fac[2], fac[0] * dfac[1] * fac[2], fac[0] * fac[1] * dfac[2]];
    Some(((idx[0] * res[1] + idx[1]) * res[2] + idx[2], w, dw))
}

fn check_shapes(source: &Tensor, flow: &Tensor) -> Result<[usize; 3]> {
    let (s, f) = (source.shape(), flow.shape());
    if s.len() != 4 || f.len() != 4 || f[0] != 3 || s[1..] != f[1..] {
        return Err(Error::dim(format!("average_splat: source {s:?} and flow {f:?} do not match")));
    }
    if !flow.is_finite() {
        return Err(Error::Numerical("average_splat: flow is not finite".into()));
    }
    Ok([s[1], s[2], s[3]])
}

fn landings(flow: &Tensor, res: [usize; 3]) -> Vec<Landing> {
    let v = res.iter().product::<usize>();
    let fd = flow.data();
    let mut out = Vec::with_capacity(v);
    for x in 0..res[0] {
        for y in 0..res[1] {
            for z in 0..res[2] {
                let q = (x * res[1] + y) * res[2] + z;
                out.push(landing([x, y, z], [fd[q], fd[v + q], fd[2 * v + q]]));
            }
        }
    }
    out
}

/// Forward pass. Contributions are accumulated in ascending source order so
/// each target sees the same summation order as an explicit per-target loop.
fn splat_forward(source: &Tensor, flow: &Tensor, mass_eps: f64) -> Result<WarpedField> {
    let res = check_shapes(source, flow)?;
    let c = source.shape()[0];
    let v = res.iter().product::<usize>();
    let sd = source.data();
    let mut num = vec![0.0; c * v];
    let mut den = vec![0.0; v];
    for (q, l) in landings(flow, res).iter().enumerate() {
        for k in 0..8 {
            let Some((p, w, _)) = corner(l, k, res) else { continue };
            if w == 0.0 {
                continue;
            }
            den[p] += w;
            for ch in 0..c {
                num[ch * v + p] += w * sd[ch * v + q];
            }
        }
    }
    let hole_mask: Vec<bool> = den.iter().map(|&d| d < mass_eps).collect();
    for ch in 0..c {
        for p in 0..v {
            num[ch * v + p] = if hole_mask[p] { 0.0 } else { num[ch * v + p] / den[p] };
        }
    }
    Ok(WarpedField {
        values: Tensor::new(source.shape().to_vec(), num)?,
        mass: Tensor::new(vec![1, res[0], res[1], res[2]], den)?,
        hole_mask,
    })
}

/// Non-differentiable splat of a plain grid.
pub fn average_splat(source: &Tensor, flow: &FlowGrid) -> Result<WarpedField> {
    splat_forward(source, &flow.values, MASS_EPS)
}

/// Differentiable splat. Gradients reach both `source` and `flow` through the
/// numerator, the denominator and the exposed mass.
pub fn average_splat_op(tape: &Tape, source: Var, flow: Var, mass_eps: f64) -> Result<SplatVars> {
    let src = tape.value(source);
    let fl = tape.value(flow);
    let warped = splat_forward(&src, &fl, mass_eps)?;
    let res = check_shapes(&src, &fl)?;
    let values = warped.values.clone();
    let mass = warped.mass.clone();
    let holes = warped.hole_mask.clone();
    let outs = tape.record("average_splat", &[source, flow], vec![warped.values, warped.mass], move |g, need| {
        let c = src.shape()[0];
        let v = res.iter().product::<usize>();
        let (gv, gm) = (g[0].data(), g[1].data());
        let (vals, den, sd) = (values.data(), mass.data(), src.data());
        // sensitivities of the numerator and denominator sums
        let mut g_num = vec![0.0; c * v];
        let mut g_den = gm.to_vec();
        for p in 0..v {
            if holes[p] {
                continue;
            }
            for ch in 0..c {
                let u = gv[ch * v + p];
                g_num[ch * v + p] = u / den[p];
                g_den[p] -= u * vals[ch * v + p] / den[p];
            }
        }
        let mut g_src = vec![0.0; if need[0] { c * v } else { 0 }];
        let mut g_flow = vec![0.0; if need[1] { 3 * v } else { 0 }];
        for (q, l) in landings(&fl, res).iter().enumerate() {
            for k in 0..8 {
                let Some((p, w, dw)) = corner(l, k, res) else { continue };
                let mut g_w = g_den[p];
                for ch in 0..c {
                    if need[0] {
                        g_src[ch * v + q] += w * g_num[ch * v + p];
                    }
                    g_w += sd[ch * v + q] * g_num[ch * v + p];
                }
                if need[1] {
                    for a in 0..3 {
                        g_flow[a * v + q] += g_w * dw[a];
                    }
                }
            }
        }
        vec![
            need[0].then(|| Tensor::new(src.shape().to_vec(), g_src).expect("splat grad")),
            need[1].then(|| Tensor::new(fl.shape().to_vec(), g_flow).expect("splat grad")),
        ]
    })?;
    Ok(SplatVars { values: outs[0], mass: outs[1], hole_mask: warped.hole_mask })
}

/// Splat density and colour features together with one shared denominator.
pub fn splat_radiance(field: &CanonicalRadianceField, flow: &FlowGrid) -> Result<(CanonicalRadianceField, WarpedField)> {
    if field.sigma.res != flow.res || field.color_feat.res != flow.res {
        return Err(Error::dim(format!("splat_radiance: field {:?} vs flow {:?}", field.sigma.res, flow.res)));
    }
    let warped = average_splat(&field.stacked(), flow)?;
    let out = CanonicalRadianceField::from_stacked(&warped.values, field.sigma.bbox)?;
    Ok((out, warped))
}

/// Convenience for tests and tools: a flow grid with a constant displacement.
pub fn constant_flow(res: [usize; 3], bbox: Bbox, d: [f64; 3]) -> FlowGrid {
    let v = res.iter().product::<usize>();
    let data = (0..3).flat_map(|a| std::iter::repeat(d[a]).take(v)).collect();
    VoxelGrid::new("flow", bbox, Tensor::new(vec![3, res[0], res[1], res[2]], data).expect("flow")).expect("flow grid")
}

//! DCT trajectories and forward flow out of canonical time.
//!
//! Each voxel stores `3·C` coefficients (axis-major). The offset of a voxel at
//! time `t` is `Σ_c coeff[a, c] · cos(π c t)`, and the flow to time `t` is the
//! offset at `t` minus the offset at the canonical time. Flow is measured in
//! voxel-index units per axis; multiply by [`voxel_size`] for world units.

use crate::diffcore::{Dims3, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::{lattice_index, voxel_size, Bbox, VoxelGrid};

/// Tag written into checkpoints so the basis convention travels with the coefficients.
pub const BASIS_TAG: &str = "cos(pi*c*t), c=0..C-1, t in [0,1]";

/// Three-channel grid of voxel-index displacements.
pub type FlowGrid = VoxelGrid;

/// `ψ_c(t) = cos(π c t)` for `c < count`.
pub fn dct_basis(t: f64, count: usize) -> Vec<f64> {
    (0..count).map(|c| (std::f64::consts::PI * c as f64 * t).cos()).collect()
}

/// Per-axis offset `Σ_c coeffs[a·C + c] · ψ_c(t)`.
pub fn position_offset_at(coeffs: &[f64], t: f64) -> [f64; 3] {
    let c = coeffs.len() / 3;
    let basis = dct_basis(t, c);
    [0, 1, 2].map(|a| offset_sum(&coeffs[a * c..(a + 1) * c], &basis))
}

fn offset_sum(coeffs: &[f64], basis: &[f64]) -> f64 {
    coeffs.iter().zip(basis).map(|(k, b)| k * b).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryField {
    /// `[(3·C)×Nx×Ny×Nz]`
    pub coeffs: Tensor,
    pub c_dct: usize,
    pub t_can: f64,
    pub bbox: Bbox,
}

impl TrajectoryField {
    pub fn new(coeffs: Tensor, t_can: f64, bbox: Bbox) -> Result<Self> {
        if coeffs.rank() != 4 || coeffs.shape()[0] % 3 != 0 || coeffs.shape()[0] == 0 {
            return Err(Error::dim(format!("trajectory coefficients must be [3C×Nx×Ny×Nz], got {:?}", coeffs.shape())));
        }
        if !(0.0..=1.0).contains(&t_can) {
            return Err(Error::Domain(format!("canonical time {t_can} outside [0, 1]")));
        }
        let c_dct = coeffs.shape()[0] / 3;
        Ok(TrajectoryField { coeffs, c_dct, t_can, bbox })
    }

    pub fn res(&self) -> Dims3 {
        let s = self.coeffs.shape();
        [s[1], s[2], s[3]]
    }

    /// Coefficient vector of one voxel.
    pub fn voxel_coeffs(&self, idx: [usize; 3]) -> Vec<f64> {
        let r = self.res();
        let v: usize = r.iter().product();
        let flat = (idx[0] * r[1] + idx[1]) * r[2] + idx[2];
        (0..3 * self.c_dct).map(|k| self.coeffs.data()[k * v + flat]).collect()
    }

    pub fn flow_at(&self, t: f64) -> Result<FlowGrid> {
        check_time(t)?;
        let res = self.res();
        let data = flow_kernel(self.coeffs.data(), self.c_dct, res.iter().product(), t, self.t_can);
        VoxelGrid::new("flow", self.bbox, Tensor::new(vec![3, res[0], res[1], res[2]], data)?)
    }

    /// World-space polyline of the material point that sits at `point` at
    /// canonical time. Coefficients are trilinearly interpolated.
    pub fn sample_trajectory(&self, point: [f64; 3], times: &[f64]) -> Result<Vec<[f64; 4]>> {
        if !self.bbox.contains(point) {
            return Err(Error::Domain(format!("query point {point:?} outside the trajectory bbox")));
        }
        let res = self.res();
        let v: usize = res.iter().product();
        let taps: Vec<(usize, usize, f64)> = (0..3)
            .map(|a| {
                let x = lattice_index(point[a], res[a], self.bbox.min[a], self.bbox.max[a]);
                if res[a] == 1 {
                    return (0, 0, 0.0);
                }
                let i0 = (x.floor() as usize).min(res[a] - 2);
                (i0, i0 + 1, x - i0 as f64)
            })
            .collect();
        let mut coeffs = vec![0.0; 3 * self.c_dct];
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let hi = corner >> (2 - a) & 1 == 1;
                idx[a] = if hi { taps[a].1 } else { taps[a].0 };
                w *= if hi { taps[a].2 } else { 1.0 - taps[a].2 };
            }
            if w == 0.0 {
                continue;
            }
            let flat = (idx[0] * res[1] + idx[1]) * res[2] + idx[2];
            for (k, c) in coeffs.iter_mut().enumerate() {
                *c += w * self.coeffs.data()[k * v + flat];
            }
        }
        let vs = voxel_size(res, &self.bbox);
        let at_can = position_offset_at(&coeffs, self.t_can);
        times
            .iter()
            .map(|&t| {
                check_time(t)?;
                let at_t = position_offset_at(&coeffs, t);
                Ok([t, point[0] + (at_t[0] - at_can[0]) * vs[0], point[1] + (at_t[1] - at_can[1]) * vs[1], point[2] + (at_t[2] - at_can[2]) * vs[2]])
            })
            .collect()
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Flow per voxel and axis. The two offsets are summed identically, so the
/// result at `t == t_can` is exactly `+0.0`.
fn flow_kernel(coeffs: &[f64], c_dct: usize, voxels: usize, t: f64, t_can: f64) -> Vec<f64> {
    let at_t = dct_basis(t, c_dct);
    let at_can = dct_basis(t_can, c_dct);
    let mut out = vec![0.0; 3 * voxels];
    let mut col = vec![0.0; c_dct];
    for a in 0..3 {
        for v in 0..voxels {
            for (c, slot) in col.iter_mut().enumerate() {
                *slot = coeffs[(a * c_dct + c) * voxels + v];
            }
            out[a * voxels + v] = offset_sum(&col, &at_t) - offset_sum(&col, &at_can);
        }
    }
    out
}

/// Differentiable flow `[3×Nx×Ny×Nz]` from coefficients `[(3C)×Nx×Ny×Nz]`.
pub fn flow_at(tape: &Tape, coeffs: Var, t: f64, t_can: f64) -> Result<Var> {
    check_time(t)?;
    check_time(t_can)?;
    let tc = tape.value(coeffs);
    if tc.rank() != 4 || tc.shape()[0] % 3 != 0 {
        return Err(Error::dim(format!("flow_at: coefficients {:?}", tc.shape())));
    }
    let c_dct = tc.shape()[0] / 3;
    let s = tc.shape().to_vec();
    let voxels = s[1] * s[2] * s[3];
    let out = Tensor::new(vec![3, s[1], s[2], s[3]], flow_kernel(tc.data(), c_dct, voxels, t, t_can))?;
    let diff: Vec<f64> = dct_basis(t, c_dct).iter().zip(dct_basis(t_can, c_dct)).map(|(a, b)| a - b).collect();
    tape.record1("flow_at", &[coeffs], out, move |g, _| {
        let mut gc = vec![0.0; 3 * c_dct * voxels];
        for a in 0..3 {
            for (c, d) in diff.iter().enumerate() {
                let dst = &mut gc[(a * c_dct + c) * voxels..(a * c_dct + c + 1) * voxels];
                for (o, u) in dst.iter_mut().zip(&g[0].data()[a * voxels..(a + 1) * voxels]) {
                    *o = u * d;
                }
            }
        }
        vec![Some(Tensor::new(s.clone(), gc).expect("flow grad"))]
    })
}

/// Least-squares DCT coefficients reproducing `offsets` at `times`
/// (Householder QR; needs at least `count` distinct times).
pub fn fit_dct_coefficients(times: &[f64], offsets: &[f64], count: usize) -> Result<Vec<f64>> {
    let m = times.len();
    if m != offsets.len() || m < count || count == 0 {
        return Err(Error::dim(format!("need at least {count} samples, got {m}")));
    }
    let mut a: Vec<Vec<f64>> = times.iter().map(|&t| dct_basis(t, count)).collect();
    let mut b = offsets.to_vec();
    for k in 0..count {
        let norm = (k..m).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numerical("rank-deficient DCT design matrix".into()));
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| a[i][k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..count {
            let dot: f64 = (k..m).map(|i| v[i - k] * a[i][j]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                a[i][j] -= f * v[i - k];
            }
        }
        let dot: f64 = (k..m).map(|i| v[i - k] * b[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for i in k..m {
            b[i] -= f * v[i - k];
        }
    }
    let mut x = vec![0.0; count];
    for k in (0..count).rev() {
        let s: f64 = (k + 1..count).map(|j| a[k][j] * x[j]).sum();
        if a[k][k].abs() < 1e-14 {
            return Err(Error::Numerical("rank-deficient DCT design matrix".into()));
        }
        x[k] = (b[k] - s) / a[k][k];
    }
    Ok(x)
}

//! World-anchored voxel grids, positional encoding and the canonical decoders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Dims3, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Axis-aligned world-space box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bbox {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|i| !(min[i] < max[i]) || !min[i].is_finite() || !max[i].is_finite()) {
            return Err(Error::Domain(format!("invalid bbox {min:?}..{max:?}")));
        }
        Ok(Bbox { min, max })
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Per-axis counts proportional to the edge lengths with a product close
    /// to `expected_voxels`.
    pub fn resolution_for(&self, expected_voxels: usize) -> Dims3 {
        let e = self.extent();
        let edge = (e[0] * e[1] * e[2] / expected_voxels.max(1) as f64).cbrt();
        [0, 1, 2].map(|i| ((e[i] / edge).round() as usize).max(1))
    }
}

/// World distance between adjacent lattice points along each axis.
pub fn voxel_size(res: Dims3, bbox: &Bbox) -> [f64; 3] {
    let e = bbox.extent();
    [0, 1, 2].map(|i| if res[i] > 1 { e[i] / (res[i] - 1) as f64 } else { e[i] })
}

/// Coordinate of lattice index `i` on an axis of `n` points over `[lo, hi]`.
pub fn lattice_coord(i: usize, n: usize, lo: f64, hi: f64) -> f64 {
    if n == 1 {
        0.5 * (lo + hi)
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

/// Continuous lattice index of world coordinate `x`.
pub fn lattice_index(x: f64, n: usize, lo: f64, hi: f64) -> f64 {
    if n == 1 {
        0.0
    } else {
        (x - lo) / (hi - lo) * (n - 1) as f64
    }
}

/// A named dense lattice of vectors anchored to a world box.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub name: String,
    pub res: Dims3,
    pub bbox: Bbox,
    /// `[C×Nx×Ny×Nz]`
    pub values: Tensor,
}

impl VoxelGrid {
    pub fn new(name: impl Into<String>, bbox: Bbox, values: Tensor) -> Result<Self> {
        if values.rank() != 4 || values.shape()[0] == 0 || values.shape()[1..].iter().any(|&n| n == 0) {
            return Err(Error::dim(format!("voxel grid values must be [C×Nx×Ny×Nz], got {:?}", values.shape())));
        }
        let s = values.shape();
        Ok(VoxelGrid { name: name.into(), res: [s[1], s[2], s[3]], bbox, values })
    }

    pub fn zeros(name: impl Into<String>, channels: usize, res: Dims3, bbox: Bbox) -> Self {
        VoxelGrid {
            name: name.into(),
            res,
            bbox,
            values: Tensor::zeros(vec![channels, res[0], res[1], res[2]]),
        }
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn voxel_count(&self) -> usize {
        self.res.iter().product()
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        voxel_size(self.res, &self.bbox)
    }

    pub fn world_position(&self, idx: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| lattice_coord(idx[a], self.res[a], self.bbox.min[a], self.bbox.max[a]))
    }

    pub fn world_coords(&self) -> Tensor {
        grid_world_coords(self.res, &self.bbox)
    }

    /// Channel vector at a voxel.
    pub fn at(&self, idx: [usize; 3]) -> Vec<f64> {
        let v = self.voxel_count();
        let flat = (idx[0] * self.res[1] + idx[1]) * self.res[2] + idx[2];
        (0..self.channels()).map(|c| self.values.data()[c * v + flat]).collect()
    }
}

/// Uniform lattice positions `[3×Nx×Ny×Nz]`; corner voxels sit on the bbox corners.
pub fn grid_world_coords(res: Dims3, bbox: &Bbox) -> Tensor {
    let v: usize = res.iter().product();
    let mut data = vec![0.0; 3 * v];
    for x in 0..res[0] {
        for y in 0..res[1] {
            for z in 0..res[2] {
                let flat = (x * res[1] + y) * res[2] + z;
                for (a, i) in [x, y, z].into_iter().enumerate() {
                    data[a * v + flat] = lattice_coord(i, res[a], bbox.min[a], bbox.max[a]);
                }
            }
        }
    }
    Tensor::new(vec![3, res[0], res[1], res[2]], data).expect("coords")
}

/// `p` followed by `sin(2^k π p), cos(2^k π p)` for `k < freqs`.
pub fn positional_encode(p: [f64; 3], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * freqs);
    out.extend_from_slice(&p);
    for k in 0..freqs {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        out.extend(p.iter().map(|&x| (f * x).sin()));
        out.extend(p.iter().map(|&x| (f * x).cos()));
    }
    out
}

pub fn encoded_len(freqs: usize) -> usize {
    3 + 6 * freqs
}

/// Encoded lattice positions `[V×(3+6L)]`, with each axis mapped onto `[-1, 1]`.
pub fn encode_grid_coords(res: Dims3, freqs: usize) -> Tensor {
    let v: usize = res.iter().product();
    let width = encoded_len(freqs);
    let mut data = Vec::with_capacity(v * width);
    for x in 0..res[0] {
        for y in 0..res[1] {
            for z in 0..res[2] {
                let p = [x, y, z].map(|i| i as f64);
                let n = [0, 1, 2].map(|a| {
                    if res[a] == 1 {
                        0.0
                    } else {
                        2.0 * p[a] / (res[a] - 1) as f64 - 1.0
                    }
                });
                data.extend(positional_encode(n, freqs));
            }
        }
    }
    Tensor::new(vec![v, width], data).expect("encoded coords")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpRole {
    Radiance,
    Trajectory,
    ViewColor,
}

impl MlpRole {
    /// `(linear layer count, hidden width)`
    pub fn architecture(self) -> (usize, usize) {
        match self {
            MlpRole::Radiance => (3, 128),
            MlpRole::Trajectory => (4, 64),
            MlpRole::ViewColor => (2, 64),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MlpRole::Radiance => "radiance",
            MlpRole::Trajectory => "trajectory",
            MlpRole::ViewColor => "viewcolor",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[in×out]`
    pub w: Tensor,
    /// `[out]`
    pub b: Tensor,
    pub act: Activation,
}

/// Fully connected network: ReLU hidden layers, role-specific output activation.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub role: MlpRole,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialisation of weights and biases.
    pub fn init<R: Rng>(role: MlpRole, input: usize, output: usize, rng: &mut R) -> Self {
        let (depth, width) = role.architecture();
        let out_act = match role {
            MlpRole::ViewColor => Activation::Sigmoid,
            _ => Activation::Identity,
        };
        let layers = (0..depth)
            .map(|l| {
                let fan_in = if l == 0 { input } else { width };
                let fan_out = if l + 1 == depth { output } else { width };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = Tensor::from_fn([fan_in, fan_out], |_| rng.gen_range(-bound..bound));
                let b = Tensor::from_fn([fan_out], |_| rng.gen_range(-bound..bound));
                let act = if l + 1 == depth { out_act } else { Activation::Relu };
                Layer { w, b, act }
            })
            .collect();
        MlpParams { role, layers }
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeroed(role: MlpRole, input: usize, output: usize) -> Self {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut p = Self::init(role, input, output, &mut rng);
        for l in &mut p.layers {
            l.w = Tensor::zeros(l.w.shape().to_vec());
            l.b = Tensor::zeros(l.b.shape().to_vec());
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("layers").w.shape()[1]
    }

    /// Zero the output layer so the network starts out producing exactly zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("layers");
        last.w = Tensor::zeros(last.w.shape().to_vec());
        last.b = Tensor::zeros(last.b.shape().to_vec());
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundMlp {
        let leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        BoundMlp { layers: self.layers.iter().map(|l| (leaf(&l.w), leaf(&l.b), l.act)).collect() }
    }

    /// Wrap existing variables, two per layer in [`MlpParams::tensors`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundMlp {
        BoundMlp { layers: self.layers.iter().zip(vars.chunks(2)).map(|(l, v)| (v[0], v[1], l.act)).collect() }
    }

    /// Evaluate on the rows of `x` without recording gradients.
    pub fn eval(&self, x: Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(x);
        Ok(tape.value(bound.forward(&tape, x)?))
    }
}

/// An [`MlpParams`] whose tensors are on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var, Activation)>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &Tape, mut x: Var) -> Result<Var> {
        for &(w, b, act) in &self.layers {
            x = tape.linear(x, w, b, act)?;
        }
        Ok(x)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }
}

/// Canonical density and colour-feature grids.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalRadianceField {
    /// Raw (pre-activation) density, one channel.
    pub sigma: VoxelGrid,
    /// Direct colour (3 channels) or view-dependent feature (12 channels).
    pub color_feat: VoxelGrid,
}

impl CanonicalRadianceField {
    /// Split a stacked `[(1+C)×N³]` tensor.
    pub fn from_stacked(stacked: &Tensor, bbox: Bbox) -> Result<Self> {
        let c = stacked.shape()[0];
        let s = &stacked.shape()[1..];
        let v: usize = s.iter().product();
        let sigma = Tensor::new(vec![1, s[0], s[1], s[2]], stacked.data()[..v].to_vec())?;
        let cf = Tensor::new(vec![c - 1, s[0], s[1], s[2]], stacked.data()[v..].to_vec())?;
        Ok(CanonicalRadianceField {
            sigma: VoxelGrid::new("sigma", bbox, sigma)?,
            color_feat: VoxelGrid::new("color_feat", bbox, cf)?,
        })
    }

    /// Density followed by colour channels, `[(1+C)×N³]`.
    pub fn stacked(&self) -> Tensor {
        let mut data = self.sigma.values.data().to_vec();
        data.extend_from_slice(self.color_feat.values.data());
        let r = self.sigma.res;
        Tensor::new(vec![1 + self.color_feat.channels(), r[0], r[1], r[2]], data).expect("stacked")
    }
}

fn per_voxel_input(tape: &Tape, encoded: Var, feat: Option<Var>, res: Dims3) -> Result<Var> {
    match feat {
        None => Ok(encoded),
        Some(f) => {
            let c = tape.shape(f)[0];
            let v: usize = res.iter().product();
            let rows = tape.reshape(f, &[c, v])?;
            let rows = tape.transpose(rows)?;
            tape.concat(&[encoded, rows], 1)
        }
    }
}

fn per_voxel_output(tape: &Tape, out: Var, res: Dims3) -> Result<Var> {
    let c = tape.shape(out)[1];
    let t = tape.transpose(out)?;
    tape.reshape(t, &[c, res[0], res[1], res[2]])
}

fn check_feature_width(mlp: &BoundMlp, tape: &Tape, encoded: Var, feat: Option<Var>) -> Result<()> {
    let want = tape.shape(mlp.layers[0].0)[0];
    let enc = tape.shape(encoded)[1];
    let got = enc + feat.map(|f| tape.shape(f)[0]).unwrap_or(0);
    if want != got {
        return Err(Error::dim(format!(
            "decoder expects {want} inputs, got {enc} encoded + {} feature channels",
            got - enc
        )));
    }
    Ok(())
}

/// Radiance decoder: per voxel `MLP(encode(p) ‖ feature)` giving raw density
/// and colour features, returned stacked as `[(1+C)×Nx×Ny×Nz]`.
pub fn decode_radiance(tape: &Tape, mlp: &BoundMlp, feat: Var, encoded: Var, res: Dims3) -> Result<Var> {
    let fc = tape.shape(feat)[0];
    if fc != 12 {
        return Err(Error::dim(format!("radiance feature grid must have 12 channels, got {fc}")));
    }
    check_feature_width(mlp, tape, encoded, Some(feat))?;
    let x = per_voxel_input(tape, encoded, Some(feat), res)?;
    let out = mlp.forward(tape, x)?;
    per_voxel_output(tape, out, res)
}

/// Trajectory decoder: per voxel DCT coefficients, `[(3·C_dct)×Nx×Ny×Nz]`, axis-major.
pub fn decode_trajectory(tape: &Tape, mlp: &BoundMlp, feat: Option<Var>, encoded: Var, res: Dims3) -> Result<Var> {
    if let Some(f) = feat {
        let fc = tape.shape(f)[0];
        if fc != 12 {
            return Err(Error::dim(format!("deformation feature grid must have 0 or 12 channels, got {fc}")));
        }
    }
    check_feature_width(mlp, tape, encoded, feat)?;
    let x = per_voxel_input(tape, encoded, feat, res)?;
    let out = mlp.forward(tape, x)?;
    if out_channels(tape, out) % 3 != 0 {
        return Err(Error::dim("trajectory decoder output must be a multiple of 3"));
    }
    per_voxel_output(tape, out, res)
}

fn out_channels(tape: &Tape, v: Var) -> usize {
    tape.shape(v)[1]
}

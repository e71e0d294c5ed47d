//! Hole filling and upsampling of warped radiance grids.
//!
//! The learned path is a four-level 3-D U-Net (skip connections concatenate)
//! followed by an upsampling head. The head's last convolution starts at zero
//! and its output is added to a trilinear upsample of the input, so an
//! untrained network reproduces [`upsample_only`].

use rand::Rng;

use crate::diffcore::{Dims3, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// `round(n·s)` per axis, at least one voxel.
pub fn scaled_dims(res: Dims3, s: f64) -> Dims3 {
    res.map(|n| ((n as f64 * s).round() as usize).max(1))
}

/// Instance norm → conv3d (3×3×3, pad 1) → optional ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `[Co×Ci×3×3×3]`
    pub kernel: Tensor,
    /// `[Co]`
    pub bias: Tensor,
    pub relu: bool,
}

impl ConvBlock {
    pub fn init<R: Rng>(cin: usize, cout: usize, relu: bool, rng: &mut R) -> Self {
        let bound = (6.0 / (27 * cin) as f64).sqrt();
        ConvBlock {
            kernel: Tensor::from_fn([cout, cin, 3, 3, 3], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::zeros([cout]),
            relu,
        }
    }

    pub fn zeroed(cin: usize, cout: usize, relu: bool) -> Self {
        ConvBlock { kernel: Tensor::zeros([cout, cin, 3, 3, 3]), bias: Tensor::zeros([cout]), relu }
    }

    fn apply(&self, tape: &Tape, x: Var, k: Var, b: Var) -> Result<Var> {
        let n = tape.instance_norm(x, NORM_EPS)?;
        let y = tape.conv3d(n, k, b)?;
        if self.relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintParams {
    pub channels: usize,
    pub widths: [usize; 4],
    pub scale: f64,
    /// Four levels of two blocks; level 0 has no pooling.
    pub encoder: Vec<[ConvBlock; 2]>,
    /// Three levels of two blocks, deepest first.
    pub decoder: Vec<[ConvBlock; 2]>,
    pub head: ConvBlock,
}

impl InpaintParams {
    pub fn init<R: Rng>(channels: usize, widths: [usize; 4], scale: f64, rng: &mut R) -> Result<Self> {
        if channels == 0 || widths.contains(&0) {
            return Err(Error::Config("inpaint widths and channels must be positive".into()));
        }
        if !(scale >= 1.0) || !scale.is_finite() {
            return Err(Error::Config(format!("inpaint scale {scale} must be ≥ 1")));
        }
        let mut encoder = Vec::with_capacity(4);
        let mut cin = channels;
        for &w in &widths {
            encoder.push([ConvBlock::init(cin, w, true, rng), ConvBlock::init(w, w, true, rng)]);
            cin = w;
        }
        let decoder = (0..3)
            .rev()
            .map(|l| [ConvBlock::init(widths[l + 1] + widths[l], widths[l], true, rng), ConvBlock::init(widths[l], widths[l], true, rng)])
            .collect();
        Ok(InpaintParams { channels, widths, scale, encoder, decoder, head: ConvBlock::zeroed(widths[0], channels, false) })
    }

    /// Every block in a fixed order: encoder, decoder, head.
    pub fn blocks(&self) -> Vec<&ConvBlock> {
        let mut out: Vec<&ConvBlock> = self.encoder.iter().flatten().collect();
        out.extend(self.decoder.iter().flatten());
        out.push(&self.head);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut ConvBlock> {
        let mut out: Vec<&mut ConvBlock> = self.encoder.iter_mut().flatten().collect();
        out.extend(self.decoder.iter_mut().flatten());
        out.push(&mut self.head);
        out
    }

    /// Named parameter tensors (kernel, bias per block) in [`blocks`](Self::blocks) order.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.blocks()
            .iter()
            .enumerate()
            .flat_map(|(i, b)| [(format!("inpaint.{i}.kernel"), b.kernel.clone()), (format!("inpaint.{i}.bias"), b.bias.clone())])
            .collect()
    }

    pub fn set_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        let mut blocks = self.blocks_mut();
        if tensors.len() != 2 * blocks.len() {
            return Err(Error::Checkpoint(format!("expected {} inpaint tensors, got {}", 2 * blocks.len(), tensors.len())));
        }
        for (b, pair) in blocks.iter_mut().zip(tensors.chunks(2)) {
            if pair[0].shape() != b.kernel.shape() || pair[1].shape() != b.bias.shape() {
                return Err(Error::Checkpoint("inpaint tensor shape mismatch".into()));
            }
            b.kernel = pair[0].clone();
            b.bias = pair[1].clone();
        }
        Ok(())
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundInpaint {
        let leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let vars = self.blocks().iter().map(|b| (leaf(&b.kernel), leaf(&b.bias))).collect();
        BoundInpaint { params: self.clone(), vars }
    }

    /// Wrap existing variables, kernel then bias per block.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundInpaint {
        BoundInpaint { params: self.clone(), vars: vars.chunks(2).map(|v| (v[0], v[1])).collect() }
    }
}

pub struct BoundInpaint {
    params: InpaintParams,
    vars: Vec<(Var, Var)>,
}

impl BoundInpaint {
    /// Leaf variables in [`InpaintParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().flat_map(|&(k, b)| [k, b]).collect()
    }

    /// `[C×D×H×W]` warped grid → `[C×D'×H'×W']` with `D' = round(D·s)`.
    pub fn forward(&self, tape: &Tape, warped: Var) -> Result<Var> {
        let shape = tape.shape(warped);
        if shape.len() != 4 || shape[0] != self.params.channels {
            return Err(Error::dim(format!("inpaint expects [{}×D×H×W], got {shape:?}", self.params.channels)));
        }
        let dims = [shape[1], shape[2], shape[3]];
        let padded = dims.map(|n| n.div_ceil(8) * 8);
        let blocks = self.params.blocks();
        let mut bi = 0;
        let mut block = |x: Var| -> Result<Var> {
            let (k, b) = self.vars[bi];
            let y = blocks[bi].apply(tape, x, k, b)?;
            bi += 1;
            Ok(y)
        };

        let mut x = tape.pad_end(warped, padded)?;
        let mut skips = Vec::with_capacity(4);
        for level in 0..4 {
            if level > 0 {
                x = tape.max_pool3d(x)?;
            }
            x = block(x)?;
            x = block(x)?;
            skips.push(x);
        }
        x = skips.pop().expect("bottom level");
        while let Some(skip) = skips.pop() {
            let s = tape.shape(skip);
            let up = tape.resample_trilinear(x, [s[1], s[2], s[3]])?;
            x = tape.concat(&[up, skip], 0)?;
            x = block(x)?;
            x = block(x)?;
        }
        x = tape.crop(x, dims)?;
        let out_dims = scaled_dims(dims, self.params.scale);
        let up = tape.resample_trilinear(x, out_dims)?;
        let residual = block(up)?;
        let base = tape.resample_trilinear(warped, out_dims)?;
        tape.add(base, residual)
    }
}

/// Inpaint and upsample a warped grid with fixed parameters.
pub fn inpaint_and_upsample(warped: &Tensor, params: &InpaintParams) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(warped.clone());
    let y = params.bind(&tape, false).forward(&tape, x)?;
    Ok(tape.value(y))
}

/// Channel-wise trilinear upsampling by `s` (corner-aligned lattice).
pub fn upsample_only(warped: &Tensor, s: f64) -> Result<Tensor> {
    if !(s >= 1.0) || !s.is_finite() {
        return Err(Error::Domain(format!("upsample scale {s} must be ≥ 1")));
    }
    let tape = Tape::new();
    let x = tape.constant(warped.clone());
    let sh = warped.shape();
    if sh.len() != 4 {
        return Err(Error::dim(format!("upsample_only expects [C×D×H×W], got {sh:?}")));
    }
    let y = tape.resample_trilinear(x, scaled_dims([sh[1], sh[2], sh[3]], s))?;
    Ok(tape.value(y))
}

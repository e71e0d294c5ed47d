use rand::Rng;

use super::config::{Stage, TrainConfig};
use crate::diffcore::{softplus, Dims3, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::{decode_radiance, decode_trajectory, encode_grid_coords, encoded_len, voxel_size, Bbox, BoundMlp, MlpParams, MlpRole, VoxelGrid};
use crate::inpaint::{scaled_dims, BoundInpaint, InpaintParams};
use crate::renderer::{density_shift, render_image, Camera, RenderOptions, RenderedImage};
use crate::trajectory::{flow_at, TrajectoryField};
use crate::warp::{average_splat_op, MASS_EPS};

/// Which grid a render reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderPath {
    /// Inpainted when the stage has an inpaint network, upsampled otherwise.
    Main,
    Upsampled,
}

/// All learnable state of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub stage: Stage,
    pub bbox: Bbox,
    pub res: Dims3,
    pub t_can: f64,
    pub c_dct: usize,
    pub pe_freqs: usize,
    pub scale: f64,
    /// `[12×res]`
    pub feat: Tensor,
    pub deform_feat: Option<Tensor>,
    pub radiance: MlpParams,
    pub trajectory: MlpParams,
    pub view: Option<MlpParams>,
    pub inpaint: Option<InpaintParams>,
    encoded: Tensor,
}

/// A model's parameters as tape leaves.
pub struct BoundModel {
    pub leaves: Vec<Var>,
    feat: Var,
    deform: Option<Var>,
    radiance: BoundMlp,
    trajectory: BoundMlp,
    pub view: Option<BoundMlp>,
    inpaint: Option<BoundInpaint>,
}

/// Grids produced for one time step.
pub struct StepGrids {
    /// `[(1+C)×res]`
    pub canonical: Var,
    /// `[3×res]`, voxel units
    pub flow: Option<Var>,
    pub holes: Vec<bool>,
    /// `[(1+C)×render_res]`, trilinear upsample of the warped grid
    pub up: Var,
    pub inp: Option<Var>,
}

impl StepGrids {
    pub fn main(&self) -> Var {
        self.inp.unwrap_or(self.up)
    }
}

impl Model {
    pub fn new<R: Rng>(cfg: &TrainConfig, stage: Stage, bbox: Bbox, rng: &mut R) -> Result<Self> {
        let sc = cfg.stage(stage);
        let res = bbox.resolution_for(sc.expected_voxels);
        let color = match stage {
            Stage::Coarse => 3,
            Stage::Fine => 12,
        };
        let enc = encoded_len(cfg.pe_freqs);
        let v = [cfg.feature_dim, res[0], res[1], res[2]];
        let mut trajectory = MlpParams::init(MlpRole::Trajectory, enc + cfg.deform_feature_dim, 3 * cfg.c_dct, rng);
        trajectory.zero_output_layer();
        Ok(Model {
            stage,
            bbox,
            res,
            t_can: cfg.t_can,
            c_dct: cfg.c_dct,
            pe_freqs: cfg.pe_freqs,
            scale: sc.scale,
            feat: Tensor::zeros(v),
            deform_feat: (cfg.deform_feature_dim > 0).then(|| Tensor::zeros([cfg.deform_feature_dim, res[0], res[1], res[2]])),
            radiance: MlpParams::init(MlpRole::Radiance, enc + cfg.feature_dim, 1 + color, rng),
            trajectory,
            view: (stage == Stage::Fine).then(|| MlpParams::init(MlpRole::ViewColor, 12 + 3 + 6 * crate::renderer::VIEW_FREQS, 3, rng)),
            inpaint: match stage {
                Stage::Coarse => None,
                Stage::Fine => Some(InpaintParams::init(1 + color, cfg.inpaint_widths, sc.scale, rng)?),
            },
            encoded: encode_grid_coords(res, cfg.pe_freqs),
        })
    }

    pub fn render_res(&self) -> Dims3 {
        scaled_dims(self.res, self.scale)
    }

    /// Sampling step for rendering: a fraction of the smallest render-voxel edge.
    pub fn step(&self, step_ratio: f64) -> f64 {
        step_ratio * voxel_size(self.render_res(), &self.bbox).iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("feat".to_string(), self.feat.clone())];
        if let Some(d) = &self.deform_feat {
            out.push(("deform_feat".into(), d.clone()));
        }
        let mlp = |prefix: &str, m: &MlpParams, out: &mut Vec<(String, Tensor)>| {
            for (i, l) in m.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.w"), l.w.clone()));
                out.push((format!("{prefix}.{i}.b"), l.b.clone()));
            }
        };
        mlp("radiance", &self.radiance, &mut out);
        mlp("trajectory", &self.trajectory, &mut out);
        if let Some(v) = &self.view {
            mlp("view", v, &mut out);
        }
        if let Some(p) = &self.inpaint {
            out.extend(p.tensors());
        }
        out
    }

    /// Replace parameters, in [`tensors`](Self::tensors) order.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let names = self.tensors();
        if tensors.len() != names.len() {
            return Err(Error::Checkpoint(format!("expected {} parameter tensors, got {}", names.len(), tensors.len())));
        }
        for ((name, old), new) in names.iter().zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", new.shape(), old.shape())));
            }
        }
        let mut it = tensors.into_iter();
        self.feat = it.next().expect("feat");
        if let Some(d) = &mut self.deform_feat {
            *d = it.next().expect("deform");
        }
        let mlp = |m: &mut MlpParams, it: &mut dyn Iterator<Item = Tensor>| {
            for l in &mut m.layers {
                l.w = it.next().expect("w");
                l.b = it.next().expect("b");
            }
        };
        mlp(&mut self.radiance, &mut it);
        mlp(&mut self.trajectory, &mut it);
        if let Some(v) = &mut self.view {
            mlp(v, &mut it);
        }
        if let Some(p) = &mut self.inpaint {
            let rest: Vec<Tensor> = it.collect();
            p.set_tensors(&rest)?;
        }
        Ok(())
    }

    /// Learning rate per tensor: grids get `lr_grid`, networks `lr_net`.
    pub fn learning_rates(&self, cfg: &TrainConfig) -> Vec<f64> {
        let sc = cfg.stage(self.stage);
        self.tensors().iter().map(|(n, _)| if n.ends_with("feat") { sc.lr_grid } else { sc.lr_net }).collect()
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundModel {
        let leaves = self
            .tensors()
            .into_iter()
            .map(|(_, t)| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect();
        self.bind_vars(leaves)
    }

    /// Wrap variables given in [`Model::tensors`] order.
    pub fn bind_vars(&self, leaves: Vec<Var>) -> BoundModel {
        let mut rest = &leaves[..];
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        let feat = take(1)[0];
        let deform = self.deform_feat.as_ref().map(|_| take(1)[0]);
        let radiance = self.radiance.bind_vars(take(2 * self.radiance.layers.len()));
        let trajectory = self.trajectory.bind_vars(take(2 * self.trajectory.layers.len()));
        let view = self.view.as_ref().map(|v| v.bind_vars(take(2 * v.layers.len())));
        let inpaint = self.inpaint.as_ref().map(|p| p.bind_vars(take(2 * p.blocks().len())));
        BoundModel { leaves, feat, deform, radiance, trajectory, view, inpaint }
    }

    /// Decoded canonical grid `[(1+C)×res]`.
    pub fn canonical(&self, tape: &Tape, b: &BoundModel) -> Result<Var> {
        let enc = tape.constant(self.encoded.clone());
        decode_radiance(tape, &b.radiance, b.feat, enc, self.res)
    }

    /// DCT coefficients `[(3·C)×res]`.
    pub fn coefficients(&self, tape: &Tape, b: &BoundModel) -> Result<Var> {
        let enc = tape.constant(self.encoded.clone());
        decode_trajectory(tape, &b.trajectory, b.deform, enc, self.res)
    }

    /// Warp to time `t` (or skip the warp for `None`), then upsample and inpaint.
    pub fn grids(&self, tape: &Tape, b: &BoundModel, t: Option<f64>) -> Result<StepGrids> {
        let canonical = self.canonical(tape, b)?;
        let (warped, flow, holes) = match t {
            Some(t) => {
                let coeffs = self.coefficients(tape, b)?;
                let flow = flow_at(tape, coeffs, t, self.t_can)?;
                let s = average_splat_op(tape, canonical, flow, MASS_EPS)?;
                (s.values, Some(flow), s.hole_mask)
            }
            None => (canonical, None, vec![false; self.res.iter().product()]),
        };
        let up = tape.resample_trilinear(warped, self.render_res())?;
        let inp = match &b.inpaint {
            Some(net) => Some(net.forward(tape, warped)?),
            None => None,
        };
        Ok(StepGrids { canonical, flow, holes, up, inp })
    }

    pub fn render_options(&self, cfg: &TrainConfig, background: [f64; 3]) -> RenderOptions {
        RenderOptions {
            shift: density_shift(cfg.alpha_init, self.step(cfg.step_ratio)),
            background,
            color_weight_thresh: cfg.color_weight_thresh,
        }
    }

    /// Render a full frame at time `t`; `None` renders the canonical grid without warping.
    pub fn render(&self, cfg: &TrainConfig, cam: &Camera, t: Option<f64>, path: RenderPath, background: [f64; 3]) -> Result<RenderedImage> {
        let tape = Tape::new();
        let b = self.bind(&tape, false);
        let g = self.grids(&tape, &b, t)?;
        let grid = match path {
            RenderPath::Main => g.main(),
            RenderPath::Upsampled => g.up,
        };
        let grid = tape.value(grid);
        render_image(&grid, &self.bbox, cam, self.view.as_ref(), self.step(cfg.step_ratio), &self.render_options(cfg, background))
    }

    /// The decoded trajectory field.
    pub fn trajectory_field(&self) -> Result<TrajectoryField> {
        let tape = Tape::new();
        let b = self.bind(&tape, false);
        let c = self.coefficients(&tape, &b)?;
        TrajectoryField::new(tape.value(c), self.t_can, self.bbox)
    }

    /// Per-voxel opacity of one render step, maximised over `times` of the warped density.
    pub fn occupancy_alpha(&self, cfg: &TrainConfig, times: &[f64]) -> Result<VoxelGrid> {
        let step = self.step(cfg.step_ratio);
        let shift = density_shift(cfg.alpha_init, step);
        let tape = Tape::new();
        let b = self.bind(&tape, false);
        let canonical = self.canonical(&tape, &b)?;
        let coeffs = self.coefficients(&tape, &b)?;
        let v: usize = self.res.iter().product();
        let mut best = vec![f64::NEG_INFINITY; v];
        for &t in times {
            let flow = flow_at(&tape, coeffs, t, self.t_can)?;
            let s = average_splat_op(&tape, canonical, flow, MASS_EPS)?;
            let w = tape.value(s.values);
            for (b, &raw) in best.iter_mut().zip(&w.data()[..v]) {
                *b = b.max(raw);
            }
        }
        let alpha = best.iter().map(|&raw| 1.0 - (-softplus(raw + shift) * step).exp()).collect();
        VoxelGrid::new("alpha", self.bbox, Tensor::new(vec![1, self.res[0], self.res[1], self.res[2]], alpha)?)
    }
}

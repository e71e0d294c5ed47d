//! Two-stage optimisation: a coarse proxy that fixes the bounding box, then
//! the fine model with inpainting and view-dependent colour.

mod adam;
mod checkpoint;
mod config;
mod model;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPS};
pub use checkpoint::{decode_container, encode_container, Array, Checkpoint, MAGIC, VERSION};
pub use config::{Stage, StageConfig, TrainConfig};
pub use model::{BoundModel, Model, RenderPath, StepGrids};

use crate::data::{depth_delta, psnr, ssim, Dataset, EvalRow, Frame};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::{lattice_coord, Bbox, VoxelGrid};
use crate::losses::{
    background_entropy, depth_tv, flow_l1, photometric, point_color_loss, total_loss, tv_grid, vdiff, LossReport, LossTerms,
};
use crate::renderer::{generate_rays, render_rays, sample_points, RenderedImage};

fn stage_index(stage: Stage) -> u64 {
    match stage {
        Stage::Coarse => 1,
        Stage::Fine => 2,
    }
}

/// Generator for one iteration; independent of everything but its arguments.
pub fn iteration_rng(seed: u64, stage: Stage, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage_index(stage) << 48) | iteration);
    rng
}

fn init_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage_index(stage) << 56);
    rng
}

/// Frame indices sorted by distance of their time to `t_can` (ties by index).
pub fn frames_by_time_distance(frames: &[Frame], t_can: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = ((frames[a].time - t_can).abs(), (frames[b].time - t_can).abs());
        da.total_cmp(&db).then(a.cmp(&b))
    });
    order
}

/// Active prefix of `sorted`: `initial` frames plus one per `interval` iterations.
pub fn progressive_schedule(iteration: u64, sorted: &[usize], initial: usize, interval: usize) -> &[usize] {
    let n = initial.saturating_add((iteration / interval.max(1) as u64) as usize);
    &sorted[..n.min(sorted.len())]
}

/// Tight box around voxels with opacity above `tau`, padded by one voxel and
/// clamped to the grid; the grid's own box when nothing qualifies.
pub fn shrink_bbox(alpha: &VoxelGrid, tau: f64) -> Bbox {
    let res = alpha.res;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for x in 0..res[0] {
        for y in 0..res[1] {
            for z in 0..res[2] {
                if alpha.at([x, y, z])[0] > tau {
                    any = true;
                    for (a, i) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(i);
                        hi[a] = hi[a].max(i);
                    }
                }
            }
        }
    }
    if !any {
        return alpha.bbox;
    }
    let b = &alpha.bbox;
    let min = [0, 1, 2].map(|a| lattice_coord(lo[a].saturating_sub(1), res[a], b.min[a], b.max[a]));
    let max = [0, 1, 2].map(|a| lattice_coord((hi[a] + 1).min(res[a] - 1), res[a], b.min[a], b.max[a]));
    Bbox::new(min, max).unwrap_or(*b)
}

/// Optimiser state for one stage over one dataset.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub data: &'a Dataset,
    pub model: Model,
    pub adam: AdamState,
    pub iteration: u64,
    order: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, stage: Stage, data: &'a Dataset, bbox: Bbox) -> Result<Self> {
        cfg.validate()?;
        if data.frames.is_empty() {
            return Err(Error::Domain("training needs at least one frame".into()));
        }
        let model = Model::new(cfg, stage, bbox, &mut init_rng(cfg.seed, stage))?;
        let params: Vec<Tensor> = model.tensors().into_iter().map(|(_, t)| t).collect();
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            adam: AdamState::new(&params),
            model,
            iteration: 0,
            order: frames_by_time_distance(&data.frames, cfg.t_can),
        })
    }

    pub fn resume(ck: Checkpoint, data: &'a Dataset) -> Result<Self> {
        let cfg = ck.config()?;
        if data.frames.is_empty() {
            return Err(Error::Domain("training needs at least one frame".into()));
        }
        Ok(Trainer {
            order: frames_by_time_distance(&data.frames, cfg.t_can),
            cfg,
            data,
            model: ck.model,
            adam: ck.adam,
            iteration: ck.iteration,
        })
    }

    pub fn stage(&self) -> Stage {
        self.model.stage
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.stage(),
            iteration: self.iteration,
            config_toml: self.cfg.to_toml(),
            model: self.model.clone(),
            adam: self.adam.clone(),
        }
    }

    fn active_frames(&self) -> &[usize] {
        match self.stage() {
            Stage::Coarse => &self.order,
            Stage::Fine => progressive_schedule(self.iteration, &self.order, self.cfg.progressive_initial, self.cfg.progressive_interval),
        }
    }

    /// One optimisation step on a ray batch from a single active frame.
    pub fn step(&mut self) -> Result<LossReport> {
        let tape = Tape::new();
        let b = self.model.bind(&tape, true);
        let (total, report) = self.loss(&tape, &b)?;
        if !report.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at iteration {}: {}", self.iteration, report.csv_fields())));
        }
        let leaves = b.leaves.clone();
        let grads = tape.backward(total)?;
        let grads: Vec<Option<Tensor>> = leaves.iter().map(|&v| grads.get(v).cloned()).collect();
        let mut params: Vec<Tensor> = self.model.tensors().into_iter().map(|(_, t)| t).collect();
        let lrs = self.model.learning_rates(&self.cfg);
        adam_step(&mut params, &grads, &mut self.adam, &lrs);
        self.model.set_tensors(params)?;
        self.iteration += 1;
        Ok(report)
    }

    /// Total loss of the current iteration's batch, built on the variables in `b`.
    pub fn loss(&self, tape: &Tape, b: &BoundModel) -> Result<(Var, LossReport)> {
        let stage = self.stage();
        let sc = self.cfg.stage(stage).clone();
        let mut rng = iteration_rng(self.cfg.seed, stage, self.iteration);
        let active = self.active_frames();
        let frame = &self.data.frames[active[rng.gen_range(0..active.len())]];
        let cam = &frame.camera;
        let (w, h) = (cam.width, cam.height);
        let pixels: Vec<(usize, usize)> = (0..sc.rays).map(|_| (rng.gen_range(0..w), rng.gen_range(0..h))).collect();
        let gt: Vec<f64> = pixels.iter().flat_map(|&(x, y)| frame.rgb[3 * (y * w + x)..3 * (y * w + x) + 3].iter().copied()).collect();
        let gt = Tensor::new(vec![pixels.len(), 3], gt)?;

        let bbox = self.model.bbox;
        let step = self.model.step(self.cfg.step_ratio);
        let opts = self.model.render_options(&self.cfg, self.data.background);
        let g = self.model.grids(tape, b, Some(frame.time))?;
        let rays = generate_rays(cam, &pixels)?;
        let samples = sample_points(&rays, &bbox, step, cam.near, cam.far)?;

        let paths: Vec<_> = g.inp.into_iter().chain([g.up]).collect();
        let mut rgb = Vec::new();
        let mut ptc = Vec::new();
        let mut bg = Vec::new();
        for &grid in &paths {
            let out = render_rays(tape, grid, &bbox, &rays, &samples, b.view.as_ref(), &opts)?;
            rgb.push(out.rgb);
            ptc.push((point_color_loss(tape, out.weights, out.colors, &samples, &gt)?, 1.0));
            bg.push((background_entropy(tape, out.weights, &samples)?, 1.0));
        }

        // Depth smoothness on a patch seen from a random training pose.
        let pose = &self.data.frames[rng.gen_range(0..self.data.frames.len())].camera;
        let p = self.cfg.depth_patch.min(pose.width).min(pose.height);
        let (x0, y0) = (rng.gen_range(0..=pose.width - p), rng.gen_range(0..=pose.height - p));
        let patch: Vec<(usize, usize)> = (0..p).flat_map(|y| (0..p).map(move |x| (x0 + x, y0 + y))).collect();
        let prays = generate_rays(pose, &patch)?;
        let psamples = sample_points(&prays, &bbox, step, pose.near, pose.far)?;
        let pout = render_rays(tape, g.main(), &bbox, &prays, &psamples, b.view.as_ref(), &opts)?;

        let sigma = tape.slice(g.canonical, 0, 0..1)?;
        let flow = g.flow.expect("training always warps");
        let terms = LossTerms {
            photo: Some(photometric(tape, &rgb, &gt)?),
            ptc: Some(tape.weighted_sum(&ptc)?),
            bg: Some(tape.weighted_sum(&bg)?),
            flow: Some(flow_l1(tape, flow)?),
            vdiff: match g.inp {
                Some(inp) => Some(vdiff(tape, inp, g.up)?),
                None => None,
            },
            tv_sigma: Some(tv_grid(tape, sigma)?),
            tv_flow: Some(tv_grid(tape, flow)?),
            tv_depth: Some(depth_tv(tape, pout.depth, p, p)?),
        };
        total_loss(tape, &terms, &sc.weights)
    }
}

/// Receives every iteration's report; used for logging and checkpoints.
pub trait StageObserver {
    fn on_step(&mut self, trainer: &Trainer, report: &LossReport) -> Result<()>;
}

impl<F: FnMut(&Trainer, &LossReport) -> Result<()>> StageObserver for F {
    fn on_step(&mut self, trainer: &Trainer, report: &LossReport) -> Result<()> {
        self(trainer, report)
    }
}

/// Train one stage from a fresh initialisation inside `bbox`.
pub fn run_stage(stage: Stage, data: &Dataset, cfg: &TrainConfig, bbox: Bbox, observer: &mut dyn StageObserver) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(cfg, stage, data, bbox)?;
    let mut last = None;
    for _ in 0..cfg.stage(stage).iterations {
        let report = trainer.step().map_err(|e| match (&e, last) {
            (Error::Numerical(m), Some(r)) => Error::Numerical(format!("{m}; last report {}", LossReport::csv_fields(&r))),
            _ => e,
        })?;
        observer.on_step(&trainer, &report)?;
        last = Some(report);
    }
    Ok(trainer.checkpoint())
}

/// Shrunk bounding box derived from a coarse checkpoint and the training times.
pub fn coarse_to_fine_bbox(coarse: &Checkpoint, data: &Dataset) -> Result<Bbox> {
    let cfg = coarse.config()?;
    let mut times: Vec<f64> = data.frames.iter().map(|f| f.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let alpha = coarse.model.occupancy_alpha(&cfg, &times)?;
    Ok(shrink_bbox(&alpha, cfg.shrink_alpha))
}

pub const LOSSES_CSV: &str = "losses.csv";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const COARSE_CHECKPOINT: &str = "coarse.fwrp";
pub const FINE_CHECKPOINT: &str = "fine.fwrp";
pub const RESOLVED_CONFIG: &str = "config.toml";

/// Writes per-iteration rows and periodic checkpoints under one directory.
pub struct TrainLogger {
    losses: BufWriter<File>,
    log: BufWriter<File>,
    dir: std::path::PathBuf,
    start: Instant,
}

impl TrainLogger {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut losses = BufWriter::new(File::create(dir.join(LOSSES_CSV))?);
        let mut log = BufWriter::new(File::create(dir.join(TRAIN_LOG_CSV))?);
        writeln!(losses, "stage,iteration,{}", LossReport::CSV_HEADER)?;
        writeln!(log, "stage,iteration,{},wall_time", LossReport::CSV_HEADER)?;
        Ok(TrainLogger { losses, log, dir: dir.to_path_buf(), start: Instant::now() })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.losses.flush()?;
        self.log.flush()?;
        Ok(())
    }
}

impl StageObserver for TrainLogger {
    fn on_step(&mut self, trainer: &Trainer, report: &LossReport) -> Result<()> {
        let (stage, it) = (trainer.stage().name(), trainer.iteration);
        let fields = report.csv_fields();
        writeln!(self.losses, "{stage},{it},{fields}")?;
        writeln!(self.log, "{stage},{it},{fields},{:.3}", self.start.elapsed().as_secs_f64())?;
        if it % 100 == 0 {
            log::info!("{stage} {it}: photo {:.5} total {:.5}", report.photo, report.total);
        }
        let every = trainer.cfg.checkpoint_every as u64;
        if every > 0 && it % every == 0 {
            trainer.checkpoint().save(&self.dir.join(format!("{stage}_{it:06}.fwrp")))?;
        }
        Ok(())
    }
}

/// Both stages with logs and checkpoints written under `out`.
pub struct TrainOutcome {
    pub coarse: Checkpoint,
    pub fine: Checkpoint,
    pub fine_bbox: Bbox,
}

pub fn train(cfg: &TrainConfig, data: &Dataset, bbox: Bbox, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut logger = TrainLogger::create(out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    let coarse = run_stage(Stage::Coarse, data, cfg, bbox, &mut logger)?;
    coarse.save(&out.join(COARSE_CHECKPOINT))?;
    let fine_bbox = coarse_to_fine_bbox(&coarse, data)?;
    log::info!("fine bbox {:?} .. {:?}", fine_bbox.min, fine_bbox.max);
    let fine = run_stage(Stage::Fine, data, cfg, fine_bbox, &mut logger)?;
    fine.save(&out.join(FINE_CHECKPOINT))?;
    logger.flush()?;
    Ok(TrainOutcome { coarse, fine, fine_bbox })
}

/// Opacity-normalised depth: `depth / acc` where `acc` exceeds a small floor, else 0.
pub fn normalized_depth(depth: &[f64], acc: &[f64]) -> Vec<f64> {
    depth.iter().zip(acc).map(|(&d, &a)| if a > 1e-6 { d / a } else { 0.0 }).collect()
}

/// Ground-truth alpha at or above which a pixel counts for the depth metric.
pub const DEPTH_MASK_ALPHA: f64 = 0.5;

/// Render one frame at its time and score it against the ground truth.
pub fn evaluate_frame(model: &Model, cfg: &TrainConfig, frame: &Frame, background: [f64; 3]) -> Result<(EvalRow, RenderedImage)> {
    let img = model.render(cfg, &frame.camera, Some(frame.time), RenderPath::Main, background)?;
    let (w, h) = (img.width, img.height);
    let deltas = match &frame.depth {
        Some(gt) => {
            let pred = normalized_depth(&img.depth, &img.acc);
            let gt = normalized_depth(gt, &frame.alpha);
            let mask: Vec<bool> = frame.alpha.iter().map(|&a| a >= DEPTH_MASK_ALPHA).collect();
            if mask.iter().any(|&m| m) {
                (Some(depth_delta(&pred, &gt, &mask, 1.25)?), Some(depth_delta(&pred, &gt, &mask, 1.25 * 1.25)?))
            } else {
                (None, None)
            }
        }
        None => (None, None),
    };
    let row = EvalRow {
        frame: frame.name.clone(),
        category: frame.category,
        psnr: psnr(&img.rgb, &frame.rgb, 1.0)?,
        ssim: ssim(&img.rgb, &frame.rgb, w, h)?,
        delta_1: deltas.0,
        delta_2: deltas.1,
    };
    Ok((row, img))
}

pub fn evaluate(model: &Model, cfg: &TrainConfig, data: &Dataset) -> Result<Vec<EvalRow>> {
    data.frames.iter().map(|f| evaluate_frame(model, cfg, f, data.background).map(|(r, _)| r)).collect()
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Stage::Coarse),
            "fine" => Ok(Stage::Fine),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Voxels of the canonical (and warp) grid.
    pub expected_voxels: usize,
    pub iterations: usize,
    /// Render-grid scale relative to the warp grid.
    pub scale: f64,
    pub rays: usize,
    pub lr_grid: f64,
    pub lr_net: f64,
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub t_can: f64,
    pub c_dct: usize,
    pub pe_freqs: usize,
    pub feature_dim: usize,
    /// 0 or 12 extra channels for the trajectory decoder.
    pub deform_feature_dim: usize,
    pub inpaint_widths: [usize; 4],
    pub alpha_init: f64,
    /// Sampling step as a fraction of the smallest render-voxel edge.
    pub step_ratio: f64,
    pub shrink_alpha: f64,
    pub depth_patch: usize,
    /// Samples at or below this compositing weight skip the colour network.
    pub color_weight_thresh: f64,
    pub progressive_initial: usize,
    pub progressive_interval: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Scene box `[min, max]`; taken from the dataset when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[[f64; 3]; 2]>,
    pub coarse: StageConfig,
    pub fine: StageConfig,
}

impl TrainConfig {
    /// Desk-scale defaults: a 16³ warp grid rendered at 24³ (coarse) and 32³ (fine).
    /// With only ~20 frames the DCT basis is cut to 6 terms so a trajectory
    /// still spans several frames per degree of freedom.
    pub fn desk() -> Self {
        TrainConfig {
            seed: 0,
            t_can: 0.0,
            c_dct: 6,
            pe_freqs: 5,
            feature_dim: 12,
            deform_feature_dim: 0,
            inpaint_widths: [8, 16, 32, 64],
            alpha_init: 1e-2,
            step_ratio: 0.5,
            shrink_alpha: 0.05,
            depth_patch: 8,
            color_weight_thresh: 1e-4,
            progressive_initial: 10,
            progressive_interval: 60,
            checkpoint_every: 0,
            bbox: None,
            coarse: StageConfig {
                expected_voxels: 16 * 16 * 16,
                iterations: 2000,
                scale: 1.5,
                rays: 1024,
                lr_grid: 1e-1,
                lr_net: 1e-3,
                weights: LossWeights::coarse(),
            },
            fine: StageConfig {
                expected_voxels: 16 * 16 * 16,
                iterations: 5000,
                scale: 2.0,
                rays: 1024,
                lr_grid: 1e-1,
                lr_net: 1e-3,
                weights: LossWeights::fine(),
            },
        }
    }

    /// The published settings: 67³ / 80³ voxels, 20k / 100k iterations.
    pub fn paper() -> Self {
        let mut c = TrainConfig::desk();
        c.c_dct = 15;
        c.inpaint_widths = [16, 32, 64, 128];
        c.coarse.expected_voxels = 67 * 67 * 67;
        c.coarse.iterations = 20_000;
        c.fine.expected_voxels = 80 * 80 * 80;
        c.fine.iterations = 100_000;
        c.checkpoint_every = 5000;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::desk()),
            "paper" => Ok(TrainConfig::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Coarse => &self.coarse,
            Stage::Fine => &self.fine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.t_can) {
            return bad(format!("t_can {} outside [0, 1]", self.t_can));
        }
        if self.c_dct == 0 || self.feature_dim != 12 || !matches!(self.deform_feature_dim, 0 | 12) {
            return bad("c_dct must be positive, feature_dim 12 and deform_feature_dim 0 or 12".into());
        }
        if self.inpaint_widths.contains(&0) || self.depth_patch < 2 || self.progressive_initial == 0 || self.progressive_interval == 0 {
            return bad("widths, depth_patch (≥ 2) and progressive parameters must be positive".into());
        }
        if let Some([lo, hi]) = self.bbox {
            if (0..3).any(|a| !(hi[a] > lo[a]) || !lo[a].is_finite() || !hi[a].is_finite()) {
                return bad(format!("bbox {lo:?}..{hi:?} must have positive finite extent"));
            }
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) || !(self.step_ratio > 0.0) || !(0.0..1.0).contains(&self.shrink_alpha) {
            return bad("alpha_init and shrink_alpha must lie in (0, 1), step_ratio must be positive".into());
        }
        for (name, s) in [("coarse", &self.coarse), ("fine", &self.fine)] {
            if s.expected_voxels == 0 || s.rays == 0 || !(s.scale >= 1.0) || !(s.lr_grid > 0.0) || !(s.lr_net > 0.0) {
                return bad(format!("{name}: voxels, rays and learning rates must be positive and scale ≥ 1"));
            }
            s.weights.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overlay a possibly partial TOML document on a preset. The optional
    /// top-level `preset` key picks the base (`desk` by default).
    pub fn from_toml_overlay(text: &str) -> Result<Self> {
        let cfg_err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let mut user: toml::Table = toml::from_str(text).map_err(|e| cfg_err(&e))?;
        let preset = match user.remove("preset") {
            Some(toml::Value::String(name)) => name,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => "desk".into(),
        };
        let mut base: toml::Table = toml::from_str(&TrainConfig::preset(&preset)?.to_toml()).map_err(|e| cfg_err(&e))?;
        merge_tables(&mut base, user);
        let cfg: TrainConfig = toml::Value::Table(base).try_into().map_err(|e| cfg_err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

//! Command-line entry points.
//!
//! Every command writes under `--out`. On failure a single line
//! `error[<category>]: <message>` goes to stderr; configuration problems exit
//! with 2, runtime failures with 1.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{generate_synthetic_scene, load_dnerf_dataset, write_eval_report, Dataset, SyntheticSceneSpec};
use crate::error::{Error, Result};
use crate::fields::Bbox;
use crate::renderer::{save_depth_png, save_png};
use crate::trainer::{
    coarse_to_fine_bbox, evaluate, run_stage, train, Checkpoint, RenderPath, Stage, TrainConfig, TrainLogger, COARSE_CHECKPOINT,
    FINE_CHECKPOINT, RESOLVED_CONFIG,
};

/// Box used when neither the configuration nor the dataset provides one.
pub const DEFAULT_BBOX: [[f64; 3]; 2] = [[-1.5; 3], [1.5; 3]];
pub const RENDER_INDEX: &str = "frames.csv";
pub const TRAJECTORIES_CSV: &str = "trajectories.csv";

#[derive(Parser, Debug)]
#[command(name = "fwflow", version, about = "Dynamic radiance fields with forward-warped voxel grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset from a scene spec (JSON or TOML).
    Genscene(GenArgs),
    /// Run the coarse and fine stages.
    Train(TrainArgs),
    /// Render frames of a dataset split from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Sample learned trajectories of query points.
    Trajviz(TrajArgs),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// coarse, fine or both
    #[arg(long, default_value = "both")]
    stage: String,
    /// Coarse checkpoint to start the fine stage from (with `--stage fine`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Render every camera at these times instead of the frames' own.
    #[arg(long, num_args = 1..)]
    time: Vec<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug)]
struct TrajArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// World point `x,y,z`; repeat the flag or separate points with `;`.
    #[arg(long, num_args = 1, required = true, allow_hyphen_values = true, action = clap::ArgAction::Append)]
    points: Vec<String>,
    /// Sample at these times; default 101 uniform times in [0, 1].
    #[arg(long, num_args = 1..)]
    time: Vec<f64>,
}

/// Parse `args` (including the program name), run the command and return the exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            eprintln!("{}", msg.trim_end());
            eprintln!("error[config]: {}", msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: "));
            return 2;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Genscene(a) => genscene(a),
        Command::Train(a) => train_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Trajviz(a) => trajviz_cmd(a),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn read_config_text(path: &Path) -> Result<String> {
    require(path, "config file")?;
    Ok(fs::read_to_string(path)?)
}

fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    require(dir, "dataset directory")?;
    load_dnerf_dataset(dir, split)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require(path, "checkpoint")?;
    Checkpoint::load(path)
}

fn genscene(a: GenArgs) -> Result<()> {
    let mut spec = match &a.common.config {
        Some(p) => {
            let text = read_config_text(p)?;
            if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
            } else {
                toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
            }
        }
        None => SyntheticSceneSpec::translating_sphere(),
    };
    if let Some(seed) = a.common.seed {
        spec.seed = seed;
    }
    generate_synthetic_scene(&spec, &a.common.out)
}

/// Resolved training configuration: preset, then config file, then flags.
fn resolve_train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_toml_overlay(&read_config_text(p)?)?,
        None => TrainConfig::desk(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn scene_bbox(cfg: &TrainConfig, data: &Dataset) -> Result<Bbox> {
    match (cfg.bbox, &data.scene) {
        (Some([lo, hi]), _) => Bbox::new(lo, hi),
        (None, Some(scene)) => scene.bbox(),
        (None, None) => Bbox::new(DEFAULT_BBOX[0], DEFAULT_BBOX[1]),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a.common)?;
    let stage = a.stage.as_str();
    if !matches!(stage, "coarse" | "fine" | "both") {
        return Err(Error::Config(format!("--stage must be coarse, fine or both, got {stage:?}")));
    }
    if stage == "fine" && a.checkpoint.is_none() {
        return Err(Error::Config("--stage fine needs --checkpoint with a coarse checkpoint".into()));
    }
    let data = load_split(&a.data, "train")?;
    let bbox = scene_bbox(&cfg, &data)?;
    let out = &a.common.out;
    match stage {
        "both" => {
            train(&cfg, &data, bbox, out)?;
        }
        "coarse" => {
            let mut logger = TrainLogger::create(out)?;
            fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml())?;
            run_stage(Stage::Coarse, &data, &cfg, bbox, &mut logger)?.save(&out.join(COARSE_CHECKPOINT))?;
            logger.flush()?;
        }
        _ => {
            let coarse = load_checkpoint(a.checkpoint.as_deref().expect("checked above"))?;
            if coarse.stage != Stage::Coarse {
                return Err(Error::Config("--checkpoint must be a coarse checkpoint".into()));
            }
            let fine_bbox = coarse_to_fine_bbox(&coarse, &data)?;
            let mut logger = TrainLogger::create(out)?;
            fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml())?;
            run_stage(Stage::Fine, &data, &cfg, fine_bbox, &mut logger)?.save(&out.join(FINE_CHECKPOINT))?;
            logger.flush()?;
        }
    }
    Ok(())
}

/// Checkpoint configuration with render-time overrides from `--config`.
/// Only `step_ratio` and `color_weight_thresh` may change after training.
fn resolve_eval_config(common: &Common, ck: &Checkpoint) -> Result<TrainConfig> {
    let mut cfg = ck.config()?;
    if let Some(p) = &common.config {
        let over: toml::Table = toml::from_str(&read_config_text(p)?).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in over {
            let x = v.as_float().or_else(|| v.as_integer().map(|i| i as f64));
            match (k.as_str(), x) {
                ("step_ratio", Some(x)) => cfg.step_ratio = x,
                ("color_weight_thresh", Some(x)) => cfg.color_weight_thresh = x,
                _ => return Err(Error::Config(format!("{k}: only step_ratio and color_weight_thresh can be overridden here"))),
            }
        }
        cfg.validate()?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = resolve_eval_config(&a.common, &ck)?;
    let data = load_split(&a.data, &a.split)?;
    let out = &a.common.out;
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    let mut index = String::from("file,source_frame,time\n");
    for (i, frame) in data.frames.iter().enumerate() {
        let times = if a.time.is_empty() { vec![frame.time] } else { a.time.clone() };
        for (j, &t) in times.iter().enumerate() {
            let img = ck.model.render(&cfg, &frame.camera, Some(t), RenderPath::Main, data.background)?;
            let stem = format!("r_{i:03}_{j:02}");
            save_png(&out.join(format!("{stem}.png")), img.width, img.height, &img.rgb)?;
            save_depth_png(&out.join(format!("{stem}_depth.png")), img.width, img.height, &img.depth)?;
            let _ = writeln!(index, "{stem}.png,{},{t}", frame.name);
        }
    }
    fs::write(out.join(RENDER_INDEX), index)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = resolve_eval_config(&a.common, &ck)?;
    let data = load_split(&a.data, &a.split)?;
    fs::create_dir_all(&a.common.out)?;
    fs::write(a.common.out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    let rows = evaluate(&ck.model, &cfg, &data)?;
    write_eval_report(&rows, &a.common.out)
}

pub fn parse_point(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("point {s:?}: {e}")))?;
    <[f64; 3]>::try_from(v).map_err(|_| Error::Config(format!("point {s:?} must have three comma-separated values")))
}

fn trajviz_cmd(a: TrajArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = resolve_eval_config(&a.common, &ck)?;
    let points = a.points.iter().flat_map(|p| p.split(';')).filter(|p| !p.trim().is_empty()).map(parse_point).collect::<Result<Vec<_>>>()?;
    let times = if a.time.is_empty() { (0..=100).map(|i| i as f64 / 100.0).collect() } else { a.time.clone() };
    let field = ck.model.trajectory_field()?;
    let out = &a.common.out;
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    let mut csv = String::from("point,t,x,y,z\n");
    for (i, p) in points.iter().enumerate() {
        for [t, x, y, z] in field.sample_trajectory(*p, &times)? {
            let _ = writeln!(csv, "{i},{t},{x},{y},{z}");
        }
    }
    fs::write(out.join(TRAJECTORIES_CSV), csv)?;
    Ok(())
}

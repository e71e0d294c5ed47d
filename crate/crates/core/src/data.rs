//! Datasets in the D-NeRF layout, an analytic synthetic scene, and image metrics.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgba};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::Bbox;
use crate::renderer::{Camera, DEPTH_SCALE};

pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Space,
    Time,
    Canonical,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Space => "space",
            Category::Time => "time",
            Category::Canonical => "canonical",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub name: String,
    pub time: f64,
    pub camera: Camera,
    /// `3·W·H`, composited over the background.
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Ground-truth expected depth, zero where nothing is hit.
    pub depth: Option<Vec<f64>>,
    pub category: Option<Category>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub frames: Vec<Frame>,
    pub background: [f64; 3],
    pub width: usize,
    pub height: usize,
    /// Present for generated scenes.
    pub scene: Option<SyntheticSceneSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    #[serde(default)]
    background: Option<String>,
    #[serde(default)]
    near: Option<f64>,
    #[serde(default)]
    far: Option<f64>,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    file_path: String,
    time: f64,
    transform_matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<Category>,
}

const DEFAULT_NEAR: f64 = 2.0;
const DEFAULT_FAR: f64 = 6.0;

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load { path: path.to_path_buf(), reason: reason.into() }
}

fn with_png(dir: &Path, rel: &str) -> PathBuf {
    let p = dir.join(rel.trim_start_matches("./"));
    if p.extension().is_none() {
        p.with_extension("png")
    } else {
        p
    }
}

/// Read `transforms_{split}.json` and its images from `dir`.
pub fn load_dnerf_dataset(dir: &Path, split: &str) -> Result<Dataset> {
    let json_path = dir.join(format!("transforms_{split}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| load_err(&json_path, e.to_string()))?;
    let tf: TransformsFile = serde_json::from_str(&text).map_err(|e| load_err(&json_path, e.to_string()))?;
    let background = match tf.background.as_deref() {
        None | Some("white") => [1.0; 3],
        Some("black") => [0.0; 3],
        Some(other) => return Err(load_err(&json_path, format!("unknown background {other:?}"))),
    };
    let near = tf.near.unwrap_or(DEFAULT_NEAR);
    let far = tf.far.unwrap_or(DEFAULT_FAR);
    let mut frames = Vec::with_capacity(tf.frames.len());
    let mut size = None;
    for (i, entry) in tf.frames.iter().enumerate() {
        let frame_err = |reason: String| load_err(&json_path, format!("frame {i} ({}): {reason}", entry.file_path));
        if !(0.0..=1.0).contains(&entry.time) {
            return Err(frame_err(format!("time {} outside [0, 1]", entry.time)));
        }
        if entry.transform_matrix.len() != 4 || entry.transform_matrix.iter().any(|r| r.len() != 4) {
            return Err(frame_err("transform_matrix is not 4×4".into()));
        }
        let mut c2w = [[0.0; 4]; 4];
        for (r, row) in entry.transform_matrix.iter().enumerate() {
            c2w[r].copy_from_slice(row);
        }
        let img_path = with_png(dir, &entry.file_path);
        let img = image::open(&img_path).map_err(|e| load_err(&img_path, format!("frame {i}: {e}")))?.to_rgba8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if *size.get_or_insert((w, h)) != (w, h) {
            return Err(frame_err(format!("image is {w}×{h}, expected {:?}", size.unwrap())));
        }
        let camera = Camera::from_angle_x(w, h, tf.camera_angle_x, c2w, near, far).map_err(|e| frame_err(e.to_string()))?;
        let mut rgb = Vec::with_capacity(3 * w * h);
        let mut alpha = Vec::with_capacity(w * h);
        for px in img.pixels() {
            let a = px[3] as f64 / 255.0;
            for ch in 0..3 {
                rgb.push(px[ch] as f64 / 255.0 * a + background[ch] * (1.0 - a));
            }
            alpha.push(a);
        }
        let depth = match &entry.depth_path {
            Some(p) => Some(load_depth_png(&with_png(dir, p), w, h).map_err(|e| frame_err(e.to_string()))?),
            None => None,
        };
        frames.push(Frame { name: entry.file_path.clone(), time: entry.time, camera, rgb, alpha, depth, category: entry.category });
    }
    let (width, height) = size.ok_or_else(|| load_err(&json_path, "no frames"))?;
    let scene_path = dir.join("scene.json");
    let scene = if scene_path.exists() {
        let text = fs::read_to_string(&scene_path)?;
        Some(serde_json::from_str(&text).map_err(|e| load_err(&scene_path, e.to_string()))?)
    } else {
        None
    };
    Ok(Dataset { split: split.to_string(), frames, background, width, height, scene })
}

fn load_depth_png(path: &Path, w: usize, h: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| load_err(path, e.to_string()))?.to_luma16();
    if (img.width() as usize, img.height() as usize) != (w, h) {
        return Err(load_err(path, "depth size differs from the image"));
    }
    let sidecar = path.with_extension("json");
    let scale = match fs::read_to_string(&sidecar) {
        Ok(text) => {
            let v: serde_json::Value = serde_json::from_str(&text)?;
            v["scale"].as_f64().ok_or_else(|| load_err(&sidecar, "missing scale"))?
        }
        Err(_) => DEPTH_SCALE,
    };
    Ok(img.pixels().map(|p| p[0] as f64 / scale).collect())
}

/// Motion of a primitive: `center + velocity·t + amplitude·sin(2π·frequency·t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    #[serde(default)]
    pub velocity: [f64; 3],
    #[serde(default)]
    pub amplitude: [f64; 3],
    #[serde(default)]
    pub frequency: f64,
}

impl Motion {
    pub fn offset(&self, t: f64) -> [f64; 3] {
        let s = (2.0 * std::f64::consts::PI * self.frequency * t).sin();
        [0, 1, 2].map(|a| self.velocity[a] * t + self.amplitude[a] * s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64, albedo: [f64; 3], motion: Motion },
    Box { center: [f64; 3], half: [f64; 3], albedo: [f64; 3], motion: Motion },
}

impl Primitive {
    pub fn center_at(&self, t: f64) -> [f64; 3] {
        let (c, m) = match self {
            Primitive::Sphere { center, motion, .. } | Primitive::Box { center, motion, .. } => (center, motion),
        };
        let o = m.offset(t);
        [c[0] + o[0], c[1] + o[1], c[2] + o[2]]
    }

    fn half_extent(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { radius, .. } => [*radius; 3],
            Primitive::Box { half, .. } => *half,
        }
    }

    fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Box { albedo, .. } => *albedo,
        }
    }

    /// Nearest positive hit distance and surface normal at time `t`.
    fn intersect(&self, o: [f64; 3], d: [f64; 3], t: f64) -> Option<(f64, [f64; 3])> {
        let c = self.center_at(t);
        match self {
            Primitive::Sphere { radius, .. } => {
                let oc = sub(o, c);
                let b = dot(oc, d);
                let disc = b * b - (dot(oc, oc) - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let hit = if -b - s > 0.0 { -b - s } else { -b + s };
                if hit <= 0.0 {
                    return None;
                }
                let p = [o[0] + hit * d[0], o[1] + hit * d[1], o[2] + hit * d[2]];
                let n = sub(p, c).map(|x| x / radius);
                Some((hit, n))
            }
            Primitive::Box { half, .. } => {
                let (mut t0, mut t1, mut axis0) = (f64::NEG_INFINITY, f64::INFINITY, 0);
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if (o[a] - c[a]).abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((c[a] - half[a] - o[a]) / d[a], (c[a] + half[a] - o[a]) / d[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis0 = a;
                    }
                    t1 = t1.min(tb);
                }
                if t0 >= t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis0] = -d[axis0].signum();
                Some((t0, n))
            }
        }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    v.map(|x| x / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub radius: f64,
    /// Elevation range in degrees.
    pub elevation: [f64; 2],
    pub camera_angle_x: f64,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub bbox: [[f64; 3]; 2],
    pub primitives: Vec<Primitive>,
    pub orbit: OrbitSpec,
    pub width: usize,
    pub height: usize,
    pub train_frames: usize,
    /// Held-out frames per category (space, time, canonical).
    pub test_per_category: usize,
    pub supersample: usize,
    pub t_can: f64,
    pub light: [f64; 3],
    pub ambient: f64,
    pub background: String,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// A sphere translating along x in front of a white background.
    pub fn translating_sphere() -> Self {
        SyntheticSceneSpec {
            bbox: [[-1.0; 3], [1.0; 3]],
            primitives: vec![Primitive::Sphere {
                center: [-0.3, 0.0, 0.0],
                radius: 0.4,
                albedo: [0.85, 0.35, 0.2],
                motion: Motion { velocity: [0.6, 0.0, 0.0], amplitude: [0.0; 3], frequency: 0.0 },
            }],
            orbit: OrbitSpec { radius: 3.0, elevation: [15.0, 50.0], camera_angle_x: 0.75, near: 0.5, far: 6.0 },
            width: 64,
            height: 64,
            train_frames: 20,
            test_per_category: 8,
            supersample: 4,
            t_can: 0.0,
            light: [0.5, -0.4, 0.8],
            ambient: 0.3,
            background: "white".into(),
            seed: 1,
        }
    }

    pub fn bbox(&self) -> Result<Bbox> {
        Bbox::new(self.bbox[0], self.bbox[1])
    }

    pub fn background_rgb(&self) -> Result<[f64; 3]> {
        match self.background.as_str() {
            "white" => Ok([1.0; 3]),
            "black" => Ok([0.0; 3]),
            other => Err(Error::Config(format!("unknown background {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bbox = self.bbox()?;
        self.background_rgb()?;
        if self.width == 0 || self.height == 0 || self.train_frames < 2 || self.supersample == 0 {
            return Err(Error::Config("scene needs positive image size, ≥ 2 train frames and supersampling ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.t_can) {
            return Err(Error::Config(format!("t_can {} outside [0, 1]", self.t_can)));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let h = p.half_extent();
            for k in 0..=200 {
                let c = p.center_at(k as f64 / 200.0);
                if (0..3).any(|a| c[a] - h[a] < bbox.min[a] || c[a] + h[a] > bbox.max[a]) {
                    return Err(Error::Config(format!("primitive {i} leaves the bbox at t = {}", k as f64 / 200.0)));
                }
            }
        }
        Ok(())
    }

    /// World-space displacement of primitive `i` from canonical time to `t`.
    pub fn flow_world(&self, i: usize, t: f64) -> [f64; 3] {
        let p = &self.primitives[i];
        sub(p.center_at(t), p.center_at(self.t_can))
    }

    /// Camera on the orbit sphere looking at the origin.
    pub fn orbit_camera(&self, azimuth: f64, elevation_deg: f64) -> Result<Camera> {
        let el = elevation_deg.to_radians();
        let r = self.orbit.radius;
        let pos = [r * el.cos() * azimuth.cos(), r * el.cos() * azimuth.sin(), r * el.sin()];
        let back = unit(pos);
        let right = unit(cross([0.0, 0.0, 1.0], back));
        let up = cross(back, right);
        let mut c2w = [[0.0; 4]; 4];
        for a in 0..3 {
            c2w[a] = [right[a], up[a], back[a], pos[a]];
        }
        c2w[3][3] = 1.0;
        Camera::from_angle_x(self.width, self.height, self.orbit.camera_angle_x, c2w, self.orbit.near, self.orbit.far)
    }

    /// Supersampled analytic render: `(rgb over background, alpha, expected depth)`.
    pub fn render(&self, cam: &Camera, t: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let bg = self.background_rgb()?;
        let light = unit(self.light);
        let n = self.supersample;
        let inv = 1.0 / (n * n) as f64;
        let (w, h) = (cam.width, cam.height);
        let mut rgb = Vec::with_capacity(3 * w * h);
        let mut alpha = Vec::with_capacity(w * h);
        let mut depth = Vec::with_capacity(w * h);
        let o = cam.origin();
        for py in 0..h {
            for px in 0..w {
                let mut col = [0.0; 3];
                let (mut cover, mut dsum) = (0.0, 0.0);
                for sy in 0..n {
                    for sx in 0..n {
                        let x = (px as f64 + (sx as f64 + 0.5) / n as f64 - 0.5 * w as f64) / cam.focal;
                        let y = -(py as f64 + (sy as f64 + 0.5) / n as f64 - 0.5 * h as f64) / cam.focal;
                        let d = unit([0, 1, 2].map(|r| cam.c2w[r][0] * x + cam.c2w[r][1] * y - cam.c2w[r][2]));
                        let hit = self
                            .primitives
                            .iter()
                            .filter_map(|p| p.intersect(o, d, t).map(|(dist, nrm)| (dist, nrm, p.albedo())))
                            .min_by(|a, b| a.0.total_cmp(&b.0));
                        match hit {
                            Some((dist, nrm, albedo)) => {
                                let shade = self.ambient + (1.0 - self.ambient) * dot(nrm, light).max(0.0);
                                for ch in 0..3 {
                                    col[ch] += albedo[ch] * shade;
                                }
                                cover += 1.0;
                                dsum += dist;
                            }
                            None => col.iter_mut().zip(bg).for_each(|(c, b)| *c += b),
                        }
                    }
                }
                rgb.extend(col.map(|c| c * inv));
                alpha.push(cover * inv);
                depth.push(dsum * inv);
            }
        }
        Ok((rgb, alpha, depth))
    }
}

fn save_rgba(path: &Path, w: usize, h: usize, rgb: &[f64], alpha: &[f64], bg: [f64; 3]) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * w * h);
    for i in 0..w * h {
        let a = alpha[i];
        for ch in 0..3 {
            // straight (un-premultiplied) colour; fully transparent pixels store black
            let straight = if a > 0.0 { (rgb[3 * i + ch] - bg[ch] * (1.0 - a)) / a } else { 0.0 };
            bytes.push((straight.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        bytes.push((a * 255.0).round() as u8);
    }
    let buf: ImageBuffer<Rgba<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, bytes).expect("rgba buffer");
    buf.save(path)?;
    Ok(())
}

fn save_depth(path: &Path, w: usize, h: usize, depth: &[f64]) -> Result<()> {
    let vals: Vec<u16> = depth.iter().map(|&d| (d * DEPTH_SCALE).round().clamp(0.0, u16::MAX as f64) as u16).collect();
    let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(w as u32, h as u32, vals).expect("depth buffer");
    buf.save(path)?;
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&serde_json::json!({ "scale": DEPTH_SCALE }))?)?;
    Ok(())
}

struct PlannedFrame {
    split: &'static str,
    time: f64,
    azimuth: f64,
    elevation: f64,
    category: Option<Category>,
}

fn plan_frames(spec: &SyntheticSceneSpec) -> Vec<PlannedFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [e0, e1] = spec.orbit.elevation;
    let tau = std::f64::consts::TAU;
    let n = spec.train_frames;
    let train_times: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let mut out = Vec::new();
    let start = rng.gen_range(0.0..tau);
    for (i, &time) in train_times.iter().enumerate() {
        // golden-angle azimuths from a random start spread the training views around the orbit
        let azimuth = (start + i as f64 * 2.399_963_229_728_653 + rng.gen_range(-0.2..0.2)).rem_euclid(tau);
        out.push(PlannedFrame { split: "train", time, azimuth, elevation: rng.gen_range(e0..=e1), category: None });
    }
    for _ in 0..spec.test_per_category {
        let view = |rng: &mut ChaCha8Rng| (rng.gen_range(0.0..tau), rng.gen_range(e0..=e1));
        let (az, el) = view(&mut rng);
        out.push(PlannedFrame { split: "test", time: train_times[rng.gen_range(0..n)], azimuth: az, elevation: el, category: Some(Category::Space) });
        let (az, el) = view(&mut rng);
        let j = rng.gen_range(0..n - 1);
        let time = 0.5 * (train_times[j] + train_times[j + 1]);
        out.push(PlannedFrame { split: "test", time, azimuth: az, elevation: el, category: Some(Category::Time) });
        let (az, el) = view(&mut rng);
        out.push(PlannedFrame { split: "test", time: spec.t_can, azimuth: az, elevation: el, category: Some(Category::Canonical) });
    }
    out
}

/// Render the scene analytically and write a dataset directory:
/// `transforms_{train,val,test}.json`, RGBA PNGs, 16-bit depth PNGs and `scene.json`.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    let bg = spec.background_rgb()?;
    for dir in ["train", "test"] {
        fs::create_dir_all(out.join(dir))?;
    }
    let mut entries: [(Vec<FrameEntry>, &str); 2] = [(Vec::new(), "train"), (Vec::new(), "test")];
    for (i, plan) in plan_frames(spec).iter().enumerate() {
        let cam = spec.orbit_camera(plan.azimuth, plan.elevation)?;
        let (rgb, alpha, depth) = spec.render(&cam, plan.time)?;
        let stem = format!("{}/r_{i:03}", plan.split);
        save_rgba(&out.join(format!("{stem}.png")), spec.width, spec.height, &rgb, &alpha, bg)?;
        save_depth(&out.join(format!("{stem}_depth.png")), spec.width, spec.height, &depth)?;
        let entry = FrameEntry {
            file_path: format!("./{stem}"),
            time: plan.time,
            transform_matrix: cam.c2w.iter().map(|r| r.to_vec()).collect(),
            depth_path: Some(format!("./{stem}_depth")),
            category: plan.category,
        };
        let slot = if plan.split == "train" { 0 } else { 1 };
        entries[slot].0.push(entry);
    }
    for (frames, split) in entries {
        let tf = TransformsFile {
            camera_angle_x: spec.orbit.camera_angle_x,
            background: Some(spec.background.clone()),
            near: Some(spec.orbit.near),
            far: Some(spec.orbit.far),
            frames,
        };
        let text = serde_json::to_string_pretty(&tf)?;
        fs::write(out.join(format!("transforms_{split}.json")), &text)?;
        if split == "test" {
            fs::write(out.join("transforms_val.json"), &text)?;
        }
    }
    fs::write(out.join("scene.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(())
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(format!("psnr: {} vs {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

pub fn luminance(rgb: &[f64]) -> Vec<f64> {
    rgb.chunks(3).map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).collect()
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian filter over valid windows only.
fn filter_valid(x: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WIN + 1, h - SSIM_WIN + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..SSIM_WIN).map(|k| g[k] * x[y * w + ox + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..SSIM_WIN).map(|k| g[k] * rows[(oy + k) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM of the luminance of two RGB images (11×11 Gaussian window, σ = 1.5).
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    if a.len() != 3 * width * height || b.len() != a.len() {
        return Err(Error::dim(format!("ssim: {} and {} values for {width}×{height}", a.len(), b.len())));
    }
    if width < SSIM_WIN || height < SSIM_WIN {
        return Err(Error::Domain(format!("ssim needs at least {SSIM_WIN}×{SSIM_WIN} pixels")));
    }
    let (x, y) = (luminance(a), luminance(b));
    let g = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|v| filter_valid(v, width, height, &g));
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (vx, vy, cxy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
        total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Percentage of evaluated pixels with `max(d/d_gt, d_gt/d) < threshold`.
/// Pixels are evaluated where `mask` holds; a non-positive prediction fails.
pub fn depth_delta(d: &[f64], d_gt: &[f64], mask: &[bool], threshold: f64) -> Result<f64> {
    if d.len() != d_gt.len() || d.len() != mask.len() {
        return Err(Error::dim("depth_delta: length mismatch"));
    }
    let mut count = 0usize;
    let mut good = 0usize;
    for i in 0..d.len() {
        if !mask[i] || d_gt[i] <= 0.0 {
            continue;
        }
        count += 1;
        if d[i] > 0.0 && (d[i] / d_gt[i]).max(d_gt[i] / d[i]) < threshold {
            good += 1;
        }
    }
    if count == 0 {
        return Err(Error::Domain("depth_delta: no evaluated pixels".into()));
    }
    Ok(100.0 * good as f64 / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub frame: String,
    pub category: Option<Category>,
    pub psnr: f64,
    pub ssim: f64,
    pub delta_1: Option<f64>,
    pub delta_2: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMeans {
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub delta_1: Option<f64>,
    pub delta_2: Option<f64>,
}

/// Mean metrics over rows; depth means only over rows that have them.
pub fn split_means<'a>(rows: impl IntoIterator<Item = &'a EvalRow>) -> SplitMeans {
    let rows: Vec<&EvalRow> = rows.into_iter().collect();
    let n = rows.len().max(1) as f64;
    let mean_opt = |f: fn(&EvalRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    SplitMeans {
        frames: rows.len(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        delta_1: mean_opt(|r| r.delta_1),
        delta_2: mean_opt(|r| r.delta_2),
    }
}

/// `eval.csv` with one row per frame and `eval_summary.json` with means per category and overall.
pub fn write_eval_report(rows: &[EvalRow], out: &Path) -> Result<()> {
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut csv = String::from("frame,category,psnr,ssim,delta_1.25,delta_1.5625\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{:.4},{:.6},{},{}\n",
            r.frame,
            r.category.map(Category::name).unwrap_or(""),
            r.psnr,
            r.ssim,
            fmt_opt(r.delta_1),
            fmt_opt(r.delta_2)
        ));
    }
    fs::write(out.join("eval.csv"), csv)?;
    let mut summary = serde_json::Map::new();
    summary.insert("all".into(), serde_json::to_value(split_means(rows))?);
    for cat in [Category::Space, Category::Time, Category::Canonical] {
        let subset: Vec<&EvalRow> = rows.iter().filter(|r| r.category == Some(cat)).collect();
        if !subset.is_empty() {
            summary.insert(cat.name().into(), serde_json::to_value(split_means(subset))?);
        }
    }
    fs::write(out.join("eval_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSceneSpec {
        let mut s = SyntheticSceneSpec::translating_sphere();
        s.width = 16;
        s.height = 16;
        s.train_frames = 3;
        s.test_per_category = 1;
        s.supersample = 2;
        s
    }

    #[test]
    fn psnr_cases() {
        let a = vec![0.3; 12];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b: Vec<f64> = a.iter().map(|x| x + 0.1).collect();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    /// Per-window SSIM with explicit weighted sums.
    fn ssim_direct(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
        let (x, y) = (luminance(a), luminance(b));
        let g = gaussian_window();
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut n = 0;
        for oy in 0..=h - 11 {
            for ox in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..11 {
                    for kx in 0..11 {
                        let wt = g[ky] * g[kx];
                        let (p, q) = (x[(oy + ky) * w + ox + kx], y[(oy + ky) * w + ox + kx]);
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * p * p;
                        syy += wt * q * q;
                        sxy += wt * p * q;
                    }
                }
                let (vx, vy, cv) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn ssim_cases() {
        let (w, h) = (20, 16);
        let a: Vec<f64> = (0..3 * w * h).map(|i| if (i / 3 / 4 + i / 3 / w / 4) % 2 == 0 { 0.9 } else { 0.1 }).collect();
        assert!((ssim(&a, &a, w, h).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&a, &neg, w, h).unwrap() < 0.0);
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * 0.8 + 0.1 * ((i as f64) * 0.37).sin().abs()).collect();
        assert!((ssim(&a, &b, w, h).unwrap() - ssim_direct(&a, &b, w, h)).abs() < 1e-6);
    }

    #[test]
    fn depth_delta_cases() {
        let gt = vec![1.0, 2.0, 3.0, 4.0];
        let mask = vec![true; 4];
        assert_eq!(depth_delta(&gt, &gt, &mask, 1.25).unwrap(), 100.0);
        let twice: Vec<f64> = gt.iter().map(|d| 2.0 * d).collect();
        assert_eq!(depth_delta(&twice, &gt, &mask, 1.25).unwrap(), 0.0);
        assert_eq!(depth_delta(&twice, &gt, &mask, 1.5625).unwrap(), 0.0);
        let half = vec![1.0, 2.0, 3.0 * 1.3, 4.0 * 1.3];
        assert_eq!(depth_delta(&half, &gt, &mask, 1.25).unwrap(), 50.0);
        assert_eq!(depth_delta(&half, &gt, &mask, 1.5625).unwrap(), 100.0);
    }

    #[test]
    fn escaping_primitive_is_rejected() {
        let mut s = tiny_spec();
        if let Primitive::Sphere { motion, .. } = &mut s.primitives[0] {
            motion.velocity = [2.0, 0.0, 0.0];
        }
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn analytic_flow_and_depth() {
        let mut s = tiny_spec();
        if let Primitive::Sphere { motion, center, .. } = &mut s.primitives[0] {
            motion.velocity = [0.2, 0.0, 0.0];
            *center = [0.0; 3];
        }
        assert_eq!(s.flow_world(0, 0.0), [0.0; 3]);
        let f = s.flow_world(0, 0.7);
        assert!((f[0] - 0.14).abs() < 1e-15 && f[1] == 0.0 && f[2] == 0.0);

        // camera on +x axis looking at the origin: the centre pixel hits the sphere front
        s.width = 15;
        s.height = 15;
        s.supersample = 1;
        let cam = s.orbit_camera(0.0, 0.0).unwrap();
        let (_, alpha, depth) = s.render(&cam, 0.0).unwrap();
        let c = 7 * 15 + 7;
        assert_eq!(alpha[c], 1.0);
        assert!((depth[c] - (3.0 - 0.4)).abs() < 1e-12);
    }

    #[test]
    fn opposing_views_see_equal_silhouettes() {
        let mut s = tiny_spec();
        if let Primitive::Sphere { motion, center, .. } = &mut s.primitives[0] {
            motion.velocity = [0.0; 3];
            *center = [0.0; 3];
        }
        let a = s.render(&s.orbit_camera(0.3, 20.0).unwrap(), 0.5).unwrap().1;
        let b = s.render(&s.orbit_camera(0.3 + std::f64::consts::PI, -20.0).unwrap(), 0.5).unwrap().1;
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        assert!((sa - sb).abs() < 1e-9, "{sa} vs {sb}");
    }

    #[test]
    fn generate_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        generate_synthetic_scene(&spec, dir.path()).unwrap();
        let train = load_dnerf_dataset(dir.path(), "train").unwrap();
        assert_eq!(train.frames.len(), 3);
        assert_eq!(train.scene.as_ref(), Some(&spec));
        let test = load_dnerf_dataset(dir.path(), "test").unwrap();
        assert_eq!(test.frames.len(), 3);
        assert!(test.frames.iter().any(|f| f.category == Some(Category::Canonical) && f.time == 0.0));
        let f = &train.frames[0];
        let (rgb, _, depth) = spec.render(&f.camera, f.time).unwrap();
        assert!(psnr(&rgb, &f.rgb, 1.0).unwrap() > 45.0);
        let gt = f.depth.as_ref().unwrap();
        assert!(gt.iter().zip(&depth).all(|(a, b)| (a - b).abs() < 1e-3));

        let dir2 = tempfile::tempdir().unwrap();
        generate_synthetic_scene(&spec, dir2.path()).unwrap();
        for name in ["train/r_000.png", "test/r_004.png", "transforms_train.json"] {
            assert_eq!(fs::read(dir.path().join(name)).unwrap(), fs::read(dir2.path().join(name)).unwrap());
        }
    }

    #[test]
    fn loader_validation() {
        let dir = tempfile::tempdir().unwrap();
        let img: ImageBuffer<Rgba<u8>, _> = ImageBuffer::from_pixel(800, 2, Rgba([255, 0, 0, 255]));
        img.save(dir.path().join("a.png")).unwrap();
        let write = |time: f64, matrix: &str| {
            let json = format!(
                r#"{{"camera_angle_x": {}, "frames": [{{"file_path": "./a", "time": {time}, "transform_matrix": {matrix}}}]}}"#,
                std::f64::consts::FRAC_PI_2
            );
            fs::write(dir.path().join("transforms_train.json"), json).unwrap();
        };
        let eye = "[[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]";
        write(0.0, eye);
        let ds = load_dnerf_dataset(dir.path(), "train").unwrap();
        assert_eq!(ds.frames.len(), 1);
        assert!((ds.frames[0].camera.focal - 400.0).abs() < 1e-9);
        assert_eq!(&ds.frames[0].rgb[..3], &[1.0, 0.0, 0.0]);
        write(1.5, eye);
        let err = load_dnerf_dataset(dir.path(), "train").unwrap_err().to_string();
        assert!(err.contains("frame 0") && err.contains("./a"), "{err}");
        write(0.5, "[[1,0,0],[0,1,0],[0,0,1]]");
        assert!(load_dnerf_dataset(dir.path(), "train").is_err());
        assert!(load_dnerf_dataset(dir.path(), "val").is_err());
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            EvalRow { frame: "a".into(), category: Some(Category::Space), psnr: 30.0, ssim: 0.9, delta_1: Some(100.0), delta_2: Some(100.0) },
            EvalRow { frame: "b".into(), category: Some(Category::Canonical), psnr: 28.0, ssim: 0.8, delta_1: Some(98.0), delta_2: Some(100.0) },
        ];
        write_eval_report(&rows, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval_summary.json")).unwrap()).unwrap();
        assert_eq!(v["all"]["psnr"], 29.0);
        assert_eq!(v["canonical"]["frames"], 1);
    }
}

//! Rays, sampling, trilinear field queries and emission–absorption compositing.

use std::path::Path;
use std::sync::Arc;

use image::{ImageBuffer, Luma, Rgb};

use crate::diffcore::{softplus, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::{lattice_index, positional_encode, BoundMlp, Bbox, MlpParams};

/// Frequencies used to encode view directions.
pub const VIEW_FREQS: usize = 4;
/// 16-bit depth PNG value per world unit.
pub const DEPTH_SCALE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Row-major camera-to-world transform.
    pub c2w: [[f64; 4]; 4],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(width: usize, height: usize, focal: f64, c2w: [[f64; 4]; 4], near: f64, far: f64) -> Result<Self> {
        if width == 0 || height == 0 || !(focal > 0.0) {
            return Err(Error::Config(format!("invalid intrinsics {width}×{height}, focal {focal}")));
        }
        if !(near < far) || near < 0.0 {
            return Err(Error::Config(format!("near {near} must be non-negative and below far {far}")));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|r| c2w[r][i] * c2w[r][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::Config("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(Camera { width, height, focal, c2w, near, far })
    }

    /// Focal length from the horizontal field of view.
    pub fn from_angle_x(width: usize, height: usize, camera_angle_x: f64, c2w: [[f64; 4]; 4], near: f64, far: f64) -> Result<Self> {
        if !(camera_angle_x > 0.0 && camera_angle_x < std::f64::consts::PI) {
            return Err(Error::Config(format!("camera_angle_x {camera_angle_x} out of range")));
        }
        let focal = 0.5 * width as f64 / (0.5 * camera_angle_x).tan();
        Camera::new(width, height, focal, c2w, near, far)
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    /// Unit world direction through the centre of pixel `(px, py)`; the camera looks down −z.
    pub fn direction(&self, px: usize, py: usize) -> [f64; 3] {
        let x = (px as f64 + 0.5 - 0.5 * self.width as f64) / self.focal;
        let y = -(py as f64 + 0.5 - 0.5 * self.height as f64) / self.focal;
        let cam = [x, y, -1.0];
        let mut d = [0.0; 3];
        for (r, dr) in d.iter_mut().enumerate() {
            *dr = (0..3).map(|c| self.c2w[r][c] * cam[c]).sum();
        }
        normalize(d)
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Rays for the given pixels, each `(px, py)`.
pub fn generate_rays(cam: &Camera, pixels: &[(usize, usize)]) -> Result<RayBatch> {
    let mut batch = RayBatch::default();
    for &(px, py) in pixels {
        if px >= cam.width || py >= cam.height {
            return Err(Error::Domain(format!("pixel ({px}, {py}) outside {}×{}", cam.width, cam.height)));
        }
        batch.origins.push(cam.origin());
        batch.dirs.push(cam.direction(px, py));
    }
    Ok(batch)
}

/// All pixels in row-major order.
pub fn all_pixels(cam: &Camera) -> Vec<(usize, usize)> {
    (0..cam.height).flat_map(|y| (0..cam.width).map(move |x| (x, y))).collect()
}

/// Flattened samples of a ray batch. Ray `r` owns `offsets[r]..offsets[r + 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    pub offsets: Vec<usize>,
    /// Distance from the ray origin.
    pub t: Vec<f64>,
    pub points: Vec<[f64; 3]>,
    pub step: f64,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn ray_count(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Ray index of every sample.
    pub fn ray_of_sample(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for r in 0..self.ray_count() {
            out.extend(std::iter::repeat(r).take(self.offsets[r + 1] - self.offsets[r]));
        }
        out
    }
}

/// Entry and exit distances of a ray through `bbox`, if it hits.
pub fn slab_intersect(o: [f64; 3], d: [f64; 3], bbox: &Bbox) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < bbox.min[a] || o[a] > bbox.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((bbox.min[a] - o[a]) * inv, (bbox.max[a] - o[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 < t1).then_some((t0, t1))
}

/// Uniform samples `t_enter + (k + ½)·step` inside `[t_enter, t_exit] ∩ [near, far]`.
pub fn sample_points(rays: &RayBatch, bbox: &Bbox, step: f64, near: f64, far: f64) -> Result<RaySamples> {
    if !(step > 0.0) {
        return Err(Error::Domain(format!("sampling step {step} must be positive")));
    }
    let mut s = RaySamples { offsets: vec![0], step, ..Default::default() };
    for (o, d) in rays.origins.iter().zip(&rays.dirs) {
        if let Some((ta, tb)) = slab_intersect(*o, *d, bbox) {
            let (ta, tb) = (ta.max(near), tb.min(far));
            let mut k = 0;
            loop {
                let t = ta + (k as f64 + 0.5) * step;
                if t >= tb {
                    break;
                }
                s.t.push(t);
                s.points.push([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
                k += 1;
            }
        }
        s.offsets.push(s.t.len());
    }
    Ok(s)
}

/// Eight corner indices and weights per sample; points outside the box get none.
#[derive(Debug)]
struct Taps {
    voxels: usize,
    idx: Vec<[usize; 8]>,
    w: Vec<[f64; 8]>,
}

fn trilinear_taps(res: [usize; 3], bbox: &Bbox, points: &[[f64; 3]]) -> Taps {
    let mut idx = Vec::with_capacity(points.len());
    let mut w = Vec::with_capacity(points.len());
    for p in points {
        if !bbox.contains(*p) {
            idx.push([0; 8]);
            w.push([0.0; 8]);
            continue;
        }
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut f = [0.0; 3];
        for a in 0..3 {
            if res[a] == 1 {
                continue;
            }
            let x = lattice_index(p[a], res[a], bbox.min[a], bbox.max[a]).clamp(0.0, (res[a] - 1) as f64);
            let i0 = (x.floor() as usize).min(res[a] - 2);
            lo[a] = i0;
            hi[a] = i0 + 1;
            f[a] = x - i0 as f64;
        }
        let mut ci = [0usize; 8];
        let mut cw = [0.0; 8];
        for k in 0..8 {
            let pick = |a: usize| (k >> (2 - a)) & 1 == 1;
            let i = [0, 1, 2].map(|a| if pick(a) { hi[a] } else { lo[a] });
            ci[k] = (i[0] * res[1] + i[1]) * res[2] + i[2];
            cw[k] = [0, 1, 2].iter().map(|&a| if pick(a) { f[a] } else { 1.0 - f[a] }).product();
        }
        idx.push(ci);
        w.push(cw);
    }
    Taps { voxels: res.iter().product(), idx, w }
}

/// Trilinear query of a `[C×Nx×Ny×Nz]` grid at world points, giving `[S×C]`.
/// Points outside `bbox` read zeros.
pub fn grid_sample(tape: &Tape, grid: Var, bbox: &Bbox, points: &[[f64; 3]]) -> Result<Var> {
    let g = tape.value(grid);
    if g.rank() != 4 {
        return Err(Error::dim(format!("grid_sample expects [C×Nx×Ny×Nz], got {:?}", g.shape())));
    }
    let c = g.shape()[0];
    let res = [g.shape()[1], g.shape()[2], g.shape()[3]];
    let taps = Arc::new(trilinear_taps(res, bbox, points));
    let v = taps.voxels;
    // voxel-major copy so each corner read is contiguous
    let mut vm = vec![0.0; v * c];
    for ch in 0..c {
        for (i, &x) in g.data()[ch * v..(ch + 1) * v].iter().enumerate() {
            vm[i * c + ch] = x;
        }
    }
    let mut out = vec![0.0; points.len() * c];
    for (s, (ci, cw)) in taps.idx.iter().zip(&taps.w).enumerate() {
        let row = &mut out[s * c..(s + 1) * c];
        for k in 0..8 {
            if cw[k] == 0.0 {
                continue;
            }
            let src = &vm[ci[k] * c..(ci[k] + 1) * c];
            for (o, x) in row.iter_mut().zip(src) {
                *o += cw[k] * x;
            }
        }
    }
    let shape = g.shape().to_vec();
    tape.record1("grid_sample", &[grid], Tensor::new(vec![points.len(), c], out)?, move |gr, _| {
        let gd = gr[0].data();
        let mut acc = vec![0.0; v * c];
        for (s, (ci, cw)) in taps.idx.iter().zip(&taps.w).enumerate() {
            let row = &gd[s * c..(s + 1) * c];
            for k in 0..8 {
                if cw[k] == 0.0 {
                    continue;
                }
                for (a, x) in acc[ci[k] * c..(ci[k] + 1) * c].iter_mut().zip(row) {
                    *a += cw[k] * x;
                }
            }
        }
        let mut gg = vec![0.0; v * c];
        for ch in 0..c {
            for i in 0..v {
                gg[ch * v + i] = acc[i * c + ch];
            }
        }
        vec![Some(Tensor::new(shape.clone(), gg).expect("grid_sample grad"))]
    })
}

/// Activated density and raw colour feature at one world point.
/// Outside the box the density is zero.
pub fn query_field(grid: &Tensor, bbox: &Bbox, p: [f64; 3], shift: f64) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let g = tape.constant(grid.clone());
    let row = tape.value(grid_sample(&tape, g, bbox, &[p])?);
    if !bbox.contains(p) {
        return Ok((0.0, vec![0.0; row.numel() - 1]));
    }
    Ok((softplus(row.data()[0] + shift), row.data()[1..].to_vec()))
}

/// Density shift giving per-sample opacity `alpha_init` for zero raw density.
pub fn density_shift(alpha_init: f64, step: f64) -> f64 {
    ((-(1.0 - alpha_init).ln() / step).exp_m1()).ln()
}

/// Per-ray results, plus the per-sample quantities the losses need.
#[derive(Clone, Debug)]
pub struct RenderVars {
    /// `[R×3]`
    pub rgb: Var,
    /// `[R]`
    pub acc: Var,
    /// `[R]`
    pub depth: Var,
    /// `[S]`, `T_k·α_k`
    pub weights: Var,
    /// `[S×3]`
    pub colors: Var,
}

/// Composite `σ [S]` and `rgb [S×3]` along each ray of `samples`.
pub fn composite(tape: &Tape, sigma: Var, colors: Var, samples: &RaySamples, background: [f64; 3]) -> Result<RenderVars> {
    let (ts, tc) = (tape.value(sigma), tape.value(colors));
    let n = samples.len();
    if ts.numel() != n || tc.shape() != [n, 3] {
        return Err(Error::dim(format!("composite: σ {:?}, colours {:?} for {n} samples", ts.shape(), tc.shape())));
    }
    if ts.data().iter().any(|&s| s < 0.0) {
        return Err(Error::Domain("composite: negative density".into()));
    }
    let r = samples.ray_count();
    let offsets = samples.offsets.clone();
    let step = samples.step;
    // transmittance before and after each sample
    let mut t_in = vec![0.0; n];
    let mut t_out = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut rgb = vec![0.0; 3 * r];
    let mut acc = vec![0.0; r];
    let mut depth = vec![0.0; r];
    for ray in 0..r {
        let mut optical = 0.0f64;
        for k in offsets[ray]..offsets[ray + 1] {
            let a = ts.data()[k] * step;
            t_in[k] = (-optical).exp();
            optical += a;
            t_out[k] = (-optical).exp();
            w[k] = t_in[k] * -(-a).exp_m1();
            acc[ray] += w[k];
            depth[ray] += w[k] * samples.t[k];
            for ch in 0..3 {
                rgb[3 * ray + ch] += w[k] * tc.data()[3 * k + ch];
            }
        }
        for ch in 0..3 {
            rgb[3 * ray + ch] += (1.0 - acc[ray]) * background[ch];
        }
    }
    let t_samples = samples.t.clone();
    let wk = w.clone();
    let outs = tape.record(
        "composite",
        &[sigma, colors],
        vec![
            Tensor::new(vec![r, 3], rgb)?,
            Tensor::new(vec![r], acc)?,
            Tensor::new(vec![r], depth)?,
            Tensor::new(vec![n], w)?,
        ],
        move |g, need| {
            let (g_rgb, g_acc, g_depth, g_w) = (g[0].data(), g[1].data(), g[2].data(), g[3].data());
            let mut g_sigma = vec![0.0; n];
            let mut g_col = vec![0.0; 3 * n];
            for ray in 0..r {
                let gc = &g_rgb[3 * ray..3 * ray + 3];
                let bg: f64 = (0..3).map(|ch| gc[ch] * background[ch]).sum();
                // dL/dw_k, then dL/da_j = u_j·T_{j+1} − Σ_{k>j} u_k·w_k
                let mut later = 0.0;
                for k in (offsets[ray]..offsets[ray + 1]).rev() {
                    let u = (0..3).map(|ch| gc[ch] * tc.data()[3 * k + ch]).sum::<f64>() - bg + g_acc[ray] + g_depth[ray] * t_samples[k] + g_w[k];
                    g_sigma[k] = (u * t_out[k] - later) * step;
                    later += u * wk[k];
                    for ch in 0..3 {
                        g_col[3 * k + ch] = wk[k] * gc[ch];
                    }
                }
            }
            vec![
                need[0].then(|| Tensor::new(vec![n], g_sigma).expect("composite grad")),
                need[1].then(|| Tensor::new(vec![n, 3], g_col).expect("composite grad")),
            ]
        },
    )?;
    Ok(RenderVars { rgb: outs[0], acc: outs[1], depth: outs[2], weights: outs[3], colors })
}

/// View-dependent colour `[S'×3]` from features `[S'×12]` and unit directions.
pub fn view_color(tape: &Tape, mlp: &BoundMlp, feat: Var, dirs: &[[f64; 3]]) -> Result<Var> {
    let s = tape.shape(feat);
    if s.len() != 2 || s[1] != 12 || s[0] != dirs.len() {
        return Err(Error::Config(format!("view_color needs [S×12] features for {} directions, got {s:?}", dirs.len())));
    }
    let enc_len = 3 + 6 * VIEW_FREQS;
    // samples of one ray arrive together, so reuse the previous row when the direction repeats
    let mut data = Vec::with_capacity(dirs.len() * enc_len);
    let mut last: Option<([f64; 3], usize)> = None;
    for d in dirs {
        match last {
            Some((p, at)) if p == *d => data.extend_from_within(at..at + enc_len),
            _ => {
                last = Some((*d, data.len()));
                data.extend(positional_encode(*d, VIEW_FREQS));
            }
        }
    }
    let enc = tape.constant(Tensor::new(vec![dirs.len(), enc_len], data)?);
    let x = tape.concat(&[feat, enc], 1)?;
    mlp.forward(tape, x)
}

/// Colour of a single feature vector: `sigmoid(cf)` for 3 channels,
/// otherwise the view-colour MLP.
pub fn view_color_single(params: Option<&MlpParams>, cf: &[f64], d: [f64; 3]) -> Result<[f64; 3]> {
    match (cf.len(), params) {
        (3, _) => Ok([0, 1, 2].map(|i| crate::diffcore::sigmoid(cf[i]))),
        (12, Some(p)) => {
            let mut x = cf.to_vec();
            x.extend(positional_encode(normalize(d), VIEW_FREQS));
            let y = p.eval(Tensor::new(vec![1, x.len()], x)?)?;
            Ok([y.data()[0], y.data()[1], y.data()[2]])
        }
        (12, None) => Err(Error::Config("12-channel features need view-colour parameters".into())),
        (n, _) => Err(Error::Config(format!("colour features must have 3 or 12 channels, got {n}"))),
    }
}

#[derive(Clone, Debug)]
pub struct RenderOptions {
    pub shift: f64,
    pub background: [f64; 3],
    /// Samples whose compositing weight is at or below this skip the colour MLP.
    pub color_weight_thresh: f64,
}

/// Differentiable render of a stacked `[(1+C)×N³]` radiance grid.
pub fn render_rays(
    tape: &Tape,
    grid: Var,
    bbox: &Bbox,
    rays: &RayBatch,
    samples: &RaySamples,
    color_mlp: Option<&BoundMlp>,
    opts: &RenderOptions,
) -> Result<RenderVars> {
    let c = tape.shape(grid)[0] - 1;
    let n = samples.len();
    let q = grid_sample(tape, grid, bbox, &samples.points)?;
    let raw = tape.slice(q, 1, 0..1)?;
    let raw = tape.reshape(raw, &[n])?;
    let sigma = tape.softplus(raw, opts.shift)?;
    let feat = tape.slice(q, 1, 1..1 + c)?;
    let colors = match (c, color_mlp) {
        (3, _) => tape.sigmoid(feat)?,
        (12, Some(mlp)) => {
            let keep = heavy_samples(&tape.value(sigma), samples, opts.color_weight_thresh);
            let ray_of = samples.ray_of_sample();
            let dirs: Vec<[f64; 3]> = keep.iter().map(|&k| rays.dirs[ray_of[k]]).collect();
            let sub = tape.gather_rows(feat, &keep)?;
            let col = view_color(tape, mlp, sub, &dirs)?;
            tape.scatter_rows(col, &keep, n)?
        }
        (12, None) => return Err(Error::Config("12-channel features need the view-colour network".into())),
        (other, _) => return Err(Error::Config(format!("colour features must have 3 or 12 channels, got {other}"))),
    };
    composite(tape, sigma, colors, samples, opts.background)
}

/// Indices of samples whose compositing weight exceeds `thresh`.
fn heavy_samples(sigma: &Tensor, samples: &RaySamples, thresh: f64) -> Vec<usize> {
    let mut keep = Vec::new();
    for ray in 0..samples.ray_count() {
        let mut optical = 0.0f64;
        for k in samples.offsets[ray]..samples.offsets[ray + 1] {
            let a = sigma.data()[k] * samples.step;
            let w = (-optical).exp() * -(-a).exp_m1();
            optical += a;
            if w > thresh || thresh <= 0.0 {
                keep.push(k);
            }
        }
    }
    keep
}

/// A rendered frame, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// `3·W·H` in `[0, 1]`
    pub rgb: Vec<f64>,
    pub acc: Vec<f64>,
    pub depth: Vec<f64>,
}

/// Render every pixel of `cam` from a fixed grid, in chunks of rays.
pub fn render_image(
    grid: &Tensor,
    bbox: &Bbox,
    cam: &Camera,
    color_mlp: Option<&MlpParams>,
    step: f64,
    opts: &RenderOptions,
) -> Result<RenderedImage> {
    const CHUNK: usize = 2048;
    let pixels = all_pixels(cam);
    let mut img = RenderedImage { width: cam.width, height: cam.height, rgb: Vec::new(), acc: Vec::new(), depth: Vec::new() };
    for chunk in pixels.chunks(CHUNK) {
        let tape = Tape::new();
        let g = tape.constant(grid.clone());
        let mlp = color_mlp.map(|m| m.bind(&tape, false));
        let rays = generate_rays(cam, chunk)?;
        let samples = sample_points(&rays, bbox, step, cam.near, cam.far)?;
        let out = render_rays(&tape, g, bbox, &rays, &samples, mlp.as_ref(), opts)?;
        img.rgb.extend_from_slice(tape.value(out.rgb).data());
        img.acc.extend_from_slice(tape.value(out.acc).data());
        img.depth.extend_from_slice(tape.value(out.depth).data());
    }
    Ok(img)
}

/// 8-bit RGB PNG.
pub fn save_png(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::dim(format!("{} values for a {width}×{height} image", rgb.len())))?;
    buf.save(path)?;
    Ok(())
}

/// 16-bit depth PNG (`value = depth·DEPTH_SCALE`) with a JSON sidecar holding the scale.
pub fn save_depth_png(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    let vals: Vec<u16> = depth.iter().map(|&d| (d * DEPTH_SCALE).round().clamp(0.0, u16::MAX as f64) as u16).collect();
    let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(width as u32, height as u32, vals)
        .ok_or_else(|| Error::dim(format!("{} depths for a {width}×{height} image", depth.len())))?;
    buf.save(path)?;
    let sidecar = path.with_extension("json");
    std::fs::write(sidecar, serde_json::to_string_pretty(&serde_json::json!({ "scale": DEPTH_SCALE }))?)?;
    Ok(())
}

//! The learnable volumetric representation and its differentiable quadrature
//! volume renderer.
//!
//! The field is a dense voxel grid of raw density and color parameters with
//! trilinear interpolation; activations are softplus (density) and sigmoid
//! (color). Rendering follows the standard quadrature approximation of the
//! volume rendering integral: per-sample weights
//! `w_i = T_i (1 - exp(-sigma_i delta_i))` with running transmittance `T_i`,
//! and background compositing of the residual transmittance. Gradients of the
//! photometric MSE are derived analytically through the renderer, the
//! activations and the trilinear weights, and consumed by an Adam optimizer.

use crate::error::{Error, Result};
use crate::geometry::{camera_rays, CameraIntrinsics, Pose, Ray};
use crate::mesh::DensityGrid;
use crate::scene::Image;
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn cube(center: Vector3<f64>, side: f64) -> Aabb {
        let h = Vector3::new(side, side, side) * 0.5;
        Aabb {
            min: center - h,
            max: center + h,
        }
    }

    #[inline]
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }
}

/// Raw density value the grid is initialized with: softplus(-2) ~ 0.127, a
/// near-empty start that biases early training toward carving.
pub const RAW_DENSITY_INIT: f64 = -2.0;

/// Trainable voxel grid. Parameters live on grid nodes, `nx * ny * nz` of
/// them, x-fastest; colors are stored node-major as r, g, b.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    pub bounds: Aabb,
    pub resolution: [usize; 3],
    pub raw_density: Vec<f64>,
    pub raw_color: Vec<f64>,
}

impl RadianceField {
    pub fn new(bounds: Aabb, resolution: [usize; 3]) -> Result<RadianceField> {
        let [nx, ny, nz] = resolution;
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(Error::invalid("field resolution must be >= 2 per axis"));
        }
        for a in 0..3 {
            if !(bounds.max[a] > bounds.min[a]) {
                return Err(Error::invalid("field bounds must have positive extent"));
            }
        }
        let n = nx * ny * nz;
        Ok(RadianceField {
            bounds,
            resolution,
            raw_density: vec![RAW_DENSITY_INIT; n],
            raw_color: vec![0.0; 3 * n],
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.resolution[0] * self.resolution[1] * self.resolution[2]
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution[1] + j) * self.resolution[0] + i
    }

    /// World position of a grid node.
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let [nx, ny, nz] = self.resolution;
        let size = self.bounds.max - self.bounds.min;
        Vector3::new(
            self.bounds.min.x + size.x * i as f64 / (nx - 1) as f64,
            self.bounds.min.y + size.y * j as f64 / (ny - 1) as f64,
            self.bounds.min.z + size.z * k as f64 / (nz - 1) as f64,
        )
    }

    /// Trilinear interpolation stencil at `p`: base corner index, per-axis
    /// strides implied, fractional weights. `None` outside the bounds.
    #[inline]
    fn stencil(&self, p: &Vector3<f64>) -> Option<Stencil> {
        if !self.bounds.contains(p) {
            return None;
        }
        let [nx, ny, nz] = self.resolution;
        let size = self.bounds.max - self.bounds.min;
        let u = (p.x - self.bounds.min.x) / size.x * (nx - 1) as f64;
        let v = (p.y - self.bounds.min.y) / size.y * (ny - 1) as f64;
        let w = (p.z - self.bounds.min.z) / size.z * (nz - 1) as f64;
        let i0 = (u.floor() as usize).min(nx - 2);
        let j0 = (v.floor() as usize).min(ny - 2);
        let k0 = (w.floor() as usize).min(nz - 2);
        Some(Stencil {
            base: self.node_index(i0, j0, k0),
            fx: u - i0 as f64,
            fy: v - j0 as f64,
            fz: w - k0 as f64,
        })
    }

    #[inline]
    fn corner_offsets(&self) -> [usize; 8] {
        let [nx, ny, _] = self.resolution;
        let sy = nx;
        let sz = nx * ny;
        [0, 1, sy, sy + 1, sz, sz + 1, sz + sy, sz + sy + 1]
    }

    /// Activated field value at a point: density >= 0 and color in (0,1)^3.
    /// Outside the bounds the field is empty: `(0.0, (0.5, 0.5, 0.5))`.
    pub fn query(&self, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        match self.stencil(p) {
            None => (0.0, [0.5, 0.5, 0.5]),
            Some(st) => {
                let offs = self.corner_offsets();
                let w = st.corner_weights();
                let mut raw_d = 0.0;
                let mut raw_c = [0.0; 3];
                for c in 0..8 {
                    let idx = st.base + offs[c];
                    raw_d += w[c] * self.raw_density[idx];
                    for ch in 0..3 {
                        raw_c[ch] += w[c] * self.raw_color[3 * idx + ch];
                    }
                }
                (
                    softplus(raw_d),
                    [sigmoid(raw_c[0]), sigmoid(raw_c[1]), sigmoid(raw_c[2])],
                )
            }
        }
    }
}

#[derive(Clone, Copy)]
struct Stencil {
    base: usize,
    fx: f64,
    fy: f64,
    fz: f64,
}

impl Stencil {
    #[inline]
    fn corner_weights(&self) -> [f64; 8] {
        let (fx, fy, fz) = (self.fx, self.fy, self.fz);
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        [
            gx * gy * gz,
            fx * gy * gz,
            gx * fy * gz,
            fx * fy * gz,
            gx * gy * fz,
            fx * gy * fz,
            gx * fy * fz,
            fx * fy * fz,
        ]
    }
}

/// Training and rendering configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub rays_per_batch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub n_samples: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub background: [f64; 3],
    pub stratified: bool,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            rays_per_batch: 512,
            learning_rate: 0.08,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            n_samples: 64,
            t_near: 0.8,
            t_far: 3.2,
            background: [1.0, 1.0, 1.0],
            stratified: true,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::invalid("n_samples must be >= 2"));
        }
        if !(self.t_near < self.t_far) {
            return Err(Error::invalid("t_near must be below t_far"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.rays_per_batch == 0 {
            return Err(Error::invalid("rays_per_batch must be >= 1"));
        }
        Ok(())
    }
}

/// Full record of one rendered ray.
#[derive(Debug, Clone)]
pub struct RayTrace {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// `w_i = T_i (1 - exp(-sigma_i delta_i))`.
    pub weight: Vec<f64>,
    /// `T_i`, transmittance up to (not including) sample i; `T_1 = 1`.
    pub transmittance: Vec<f64>,
    /// `T_{N+1}`, residual transmittance behind the last sample.
    pub final_transmittance: f64,
    /// Composited color including the background term.
    pub color_out: [f64; 3],
    /// Total weight mass, `1 - T_{N+1}`.
    pub opacity: f64,
}

fn sample_depths(cfg: &TrainConfig, rng: Option<&mut ChaCha8Rng>, t: &mut Vec<f64>) {
    let n = cfg.n_samples;
    let bin = (cfg.t_far - cfg.t_near) / n as f64;
    t.clear();
    match rng {
        Some(rng) if cfg.stratified => {
            for i in 0..n {
                let u: f64 = rng.random();
                t.push(cfg.t_near + (i as f64 + u) * bin);
            }
        }
        _ => {
            for i in 0..n {
                t.push(cfg.t_near + (i as f64 + 0.5) * bin);
            }
        }
    }
}

fn deltas(t: &[f64], t_far: f64, delta: &mut Vec<f64>) {
    delta.clear();
    for i in 0..t.len() {
        if i + 1 < t.len() {
            delta.push(t[i + 1] - t[i]);
        } else {
            delta.push(t_far - t[i]);
        }
    }
}

/// Renders one ray through the field with `cfg.n_samples` quadrature samples
/// in `[t_near, t_far]`. Bin centers when `rng` is `None` or stratification
/// is off; uniform jitter within bins otherwise.
pub fn render_ray(
    field: &RadianceField,
    ray: &Ray,
    cfg: &TrainConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> RayTrace {
    let n = cfg.n_samples;
    let mut t = Vec::with_capacity(n);
    sample_depths(cfg, rng, &mut t);
    let mut delta = Vec::with_capacity(n);
    deltas(&t, cfg.t_far, &mut delta);

    let mut sigma = Vec::with_capacity(n);
    let mut color = Vec::with_capacity(n);
    let mut weight = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);

    let mut trans = 1.0_f64;
    let mut out = [0.0_f64; 3];
    for i in 0..n {
        let (s, c) = field.query(&ray.point_at(t[i]));
        let alpha = 1.0 - (-s * delta[i]).exp();
        let w = trans * alpha;
        transmittance.push(trans);
        sigma.push(s);
        color.push(c);
        weight.push(w);
        for ch in 0..3 {
            out[ch] += w * c[ch];
        }
        trans *= 1.0 - alpha;
    }
    let opacity = weight.iter().sum::<f64>();
    for ch in 0..3 {
        out[ch] += trans * cfg.background[ch];
    }

    RayTrace {
        t,
        delta,
        sigma,
        color,
        weight,
        transmittance,
        final_transmittance: trans,
        color_out: out,
        opacity,
    }
}

/// Renders a full image, one jitter-free ray per downsampled pixel.
/// Bit-reproducible across calls.
pub fn render_image(
    field: &RadianceField,
    cam: &CameraIntrinsics,
    pose: &Pose,
    cfg: &TrainConfig,
    downsample: u32,
) -> Result<Image> {
    let rays = camera_rays(cam, pose, downsample)?;
    let pixels: Vec<[f64; 3]> = rays
        .par_iter()
        .map(|ray| render_ray(field, ray, cfg, None).color_out)
        .collect();
    Ok(Image {
        width: cam.width / downsample,
        height: cam.height / downsample,
        pixels,
    })
}

/// Gradient of the photometric loss with respect to the raw parameters,
/// shaped like the field's parameter arrays.
#[derive(Debug, Clone)]
pub struct FieldGradients {
    pub d_density: Vec<f64>,
    pub d_color: Vec<f64>,
}

impl FieldGradients {
    fn zeros(field: &RadianceField) -> FieldGradients {
        FieldGradients {
            d_density: vec![0.0; field.raw_density.len()],
            d_color: vec![0.0; field.raw_color.len()],
        }
    }
}

struct SampleScratch {
    stencil: Option<Stencil>,
    sigma: f64,
    color: [f64; 3],
    weight: f64,
    trans_next: f64,
    delta: f64,
}

/// Mean squared error over `|rays| x 3` channels and its analytic gradient.
///
/// The renderer chain rule uses `dC/dc_i = w_i` and
/// `dC/dsigma_i = delta_i (T_{i+1} c_i - sum_{j>i} w_j c_j - T_{N+1} bg)`,
/// then the activation derivatives and the trilinear corner weights.
/// Accumulation runs in fixed ray order, so the result is deterministic.
pub fn loss_and_gradients(
    field: &RadianceField,
    rays: &[Ray],
    gt: &[[f64; 3]],
    cfg: &TrainConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, FieldGradients)> {
    if rays.is_empty() || rays.len() != gt.len() {
        return Err(Error::invalid(
            "ray batch and ground-truth batch must be non-empty and equal length",
        ));
    }

    let n = cfg.n_samples;
    let n_rays = rays.len();
    let offs = field.corner_offsets();
    let mut grads = FieldGradients::zeros(field);
    let mut mse = 0.0_f64;
    let inv = 1.0 / (3.0 * n_rays as f64);

    let mut t_buf: Vec<f64> = Vec::with_capacity(n);
    let mut d_buf: Vec<f64> = Vec::with_capacity(n);
    let mut samples: Vec<SampleScratch> = Vec::with_capacity(n);

    for (ray, target) in rays.iter().zip(gt.iter()) {
        sample_depths(cfg, rng.as_deref_mut(), &mut t_buf);
        deltas(&t_buf, cfg.t_far, &mut d_buf);

        // Forward pass, keeping what the backward pass needs.
        samples.clear();
        let mut trans = 1.0_f64;
        let mut out = [0.0_f64; 3];
        for i in 0..n {
            let p = ray.point_at(t_buf[i]);
            let stencil = field.stencil(&p);
            let (sigma, color) = match &stencil {
                None => (0.0, [0.5, 0.5, 0.5]),
                Some(st) => {
                    let w = st.corner_weights();
                    let mut raw_d = 0.0;
                    let mut raw_c = [0.0; 3];
                    for c in 0..8 {
                        let idx = st.base + offs[c];
                        raw_d += w[c] * field.raw_density[idx];
                        raw_c[0] += w[c] * field.raw_color[3 * idx];
                        raw_c[1] += w[c] * field.raw_color[3 * idx + 1];
                        raw_c[2] += w[c] * field.raw_color[3 * idx + 2];
                    }
                    (
                        softplus(raw_d),
                        [sigmoid(raw_c[0]), sigmoid(raw_c[1]), sigmoid(raw_c[2])],
                    )
                }
            };
            let alpha = 1.0 - (-sigma * d_buf[i]).exp();
            let weight = trans * alpha;
            trans *= 1.0 - alpha;
            for ch in 0..3 {
                out[ch] += weight * color[ch];
            }
            samples.push(SampleScratch {
                stencil,
                sigma,
                color,
                weight,
                trans_next: trans,
                delta: d_buf[i],
            });
        }
        let final_trans = trans;
        for ch in 0..3 {
            out[ch] += final_trans * cfg.background[ch];
        }

        let mut d_out = [0.0_f64; 3];
        for ch in 0..3 {
            let err = out[ch] - target[ch];
            mse += err * err * inv;
            d_out[ch] = 2.0 * err * inv;
        }

        // Backward sweep: suffix_ch = sum_{j>i} w_j c_j + T_{N+1} bg.
        let mut suffix = [
            final_trans * cfg.background[0],
            final_trans * cfg.background[1],
            final_trans * cfg.background[2],
        ];
        for s in samples.iter().rev() {
            let Some(st) = &s.stencil else {
                // Outside the bounds the field is constant; no parameters.
                continue;
            };
            let mut d_sigma = 0.0;
            let mut d_color = [0.0; 3];
            for ch in 0..3 {
                d_sigma += d_out[ch] * s.delta * (s.trans_next * s.color[ch] - suffix[ch]);
                d_color[ch] = d_out[ch] * s.weight;
            }
            for ch in 0..3 {
                suffix[ch] += s.weight * s.color[ch];
            }

            // Through the activations.
            let d_raw_density = d_sigma * (1.0 - (-s.sigma).exp());
            let d_raw_color = [
                d_color[0] * s.color[0] * (1.0 - s.color[0]),
                d_color[1] * s.color[1] * (1.0 - s.color[1]),
                d_color[2] * s.color[2] * (1.0 - s.color[2]),
            ];

            let w = st.corner_weights();
            for c in 0..8 {
                let idx = st.base + offs[c];
                grads.d_density[idx] += w[c] * d_raw_density;
                grads.d_color[3 * idx] += w[c] * d_raw_color[0];
                grads.d_color[3 * idx + 1] += w[c] * d_raw_color[1];
                grads.d_color[3 * idx + 2] += w[c] * d_raw_color[2];
            }
        }
    }

    Ok((mse, grads))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    fn new(n: usize, cfg: &TrainConfig) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub step: usize,
    pub mse: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub entries: Vec<TrainLogEntry>,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn final_psnr(&self) -> f64 {
        self.entries.last().map(|e| e.psnr).unwrap_or(f64::NAN)
    }
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

/// Trains the field in place with Adam on random ray batches drawn across
/// all images. Passing an already-trained field warm-starts refinement; the
/// optimizer moments start fresh each call.
pub fn train(
    field: &mut RadianceField,
    cam: &CameraIntrinsics,
    images: &[(Pose, Image)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("training needs at least one image"));
    }

    let start = Instant::now();
    let mut all_rays: Vec<Ray> = Vec::new();
    let mut all_gt: Vec<[f64; 3]> = Vec::new();
    for (pose, img) in images {
        if img.width == 0 || cam.width % img.width != 0 || cam.height % img.height != 0 {
            return Err(Error::invalid(
                "image dimensions must divide the camera dimensions",
            ));
        }
        let ds = cam.width / img.width;
        if cam.height / img.height != ds {
            return Err(Error::invalid(
                "image aspect must match the camera aspect",
            ));
        }
        let rays = camera_rays(cam, pose, ds)?;
        if rays.len() != img.pixels.len() {
            return Err(Error::invalid("image size does not match its rays"));
        }
        all_rays.extend(rays);
        all_gt.extend(img.pixels.iter().copied());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_density = field.raw_density.len();
    let mut adam_density = Adam::new(n_density, cfg);
    let mut adam_color = Adam::new(3 * n_density, cfg);

    let mut entries = Vec::new();
    let mut batch_rays = vec![
        Ray {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
        };
        cfg.rays_per_batch
    ];
    let mut batch_gt = vec![[0.0; 3]; cfg.rays_per_batch];

    for step in 1..=cfg.steps {
        for slot in 0..cfg.rays_per_batch {
            let pick = rng.random_range(0..all_rays.len());
            batch_rays[slot] = all_rays[pick];
            batch_gt[slot] = all_gt[pick];
        }
        let jitter = if cfg.stratified { Some(&mut rng) } else { None };
        let (mse, grads) = loss_and_gradients(field, &batch_rays, &batch_gt, cfg, jitter)?;
        adam_density.step(&mut field.raw_density, &grads.d_density);
        adam_color.step(&mut field.raw_color, &grads.d_color);

        if (cfg.log_every > 0 && step % cfg.log_every == 0) || step == cfg.steps {
            entries.push(TrainLogEntry {
                step,
                mse,
                psnr: psnr_from_mse(mse),
            });
        }
    }

    Ok(TrainReport {
        entries,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Samples the activated density at the voxel centers of a cube, ready for
/// marching cubes.
pub fn density_grid_export(
    field: &RadianceField,
    resolution: usize,
    side: f64,
    center: Vector3<f64>,
) -> Result<DensityGrid> {
    if resolution < 8 {
        return Err(Error::invalid("density export resolution must be >= 8"));
    }
    let mut values = vec![0.0; resolution * resolution * resolution];
    let grid = DensityGrid::new(resolution, resolution, resolution, side, center, values.clone())?;
    values
        .par_chunks_mut(resolution * resolution)
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..resolution {
                for i in 0..resolution {
                    let p = grid.position(i, j, k);
                    slab[j * resolution + i] = field.query(&p).0;
                }
            }
        });
    DensityGrid::new(resolution, resolution, resolution, side, center, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_field() -> RadianceField {
        RadianceField::new(Aabb::cube(Vector3::zeros(), 2.4), [8, 8, 8]).unwrap()
    }

    /// Field whose density is exactly zero everywhere: softplus(-1e9)
    /// underflows to +0.0.
    fn empty_field() -> RadianceField {
        let mut f = small_field();
        f.raw_density.fill(-1e9);
        f
    }

    fn eval_cfg(n_samples: usize) -> TrainConfig {
        TrainConfig {
            n_samples,
            stratified: false,
            background: [0.0, 0.0, 0.0],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn activation_closed_forms() {
        let mut f = small_field();
        f.raw_density.fill(0.0);
        let (sigma, color) = f.query(&Vector3::new(0.1, -0.3, 0.2));
        assert_abs_diff_eq!(sigma, std::f64::consts::LN_2, epsilon = 1e-12);
        for ch in color {
            assert_abs_diff_eq!(ch, 0.5, epsilon = 1e-12);
        }
        // Outside the bounds the field is empty.
        let (sigma, color) = f.query(&Vector3::new(5.0, 0.0, 0.0));
        assert_eq!(sigma, 0.0);
        assert_eq!(color, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn corner_query_is_exact() {
        // Power-of-two geometry makes the grid transform exact, so a corner
        // query returns the node's activated parameter bit-for-bit.
        let mut f = RadianceField::new(Aabb::cube(Vector3::zeros(), 2.0), [9, 9, 9]).unwrap();
        let idx = f.node_index(3, 5, 2);
        f.raw_density[idx] = 1.7;
        f.raw_color[3 * idx] = -0.4;
        let p = f.node_position(3, 5, 2);
        let (sigma, color) = f.query(&p);
        assert_eq!(sigma, softplus(1.7));
        assert_eq!(color[0], sigmoid(-0.4));
        assert_eq!(color[1], sigmoid(0.0));

        // On a general grid the corner identity holds to rounding noise.
        let mut g = small_field();
        let idx = g.node_index(3, 5, 2);
        g.raw_density[idx] = 1.7;
        let p = g.node_position(3, 5, 2);
        assert_abs_diff_eq!(g.query(&p).0, softplus(1.7), epsilon = 1e-12);
    }

    #[test]
    fn empty_ray_composites_background() {
        let f = empty_field();
        let cfg = TrainConfig {
            background: [0.3, 0.6, 0.9],
            stratified: false,
            ..TrainConfig::default()
        };
        let ray = Ray {
            origin: Vector3::new(-2.0, 0.0, 0.0),
            direction: Vector3::x(),
        };
        let trace = render_ray(&f, &ray, &cfg, None);
        assert!(trace.weight.iter().all(|&w| w == 0.0));
        assert_eq!(trace.color_out, [0.3, 0.6, 0.9]);
        assert_eq!(trace.opacity, 0.0);
        assert_eq!(trace.final_transmittance, 1.0);
    }

    #[test]
    fn single_sample_half_opacity() {
        // softplus(0) = ln 2 and delta = 1 gives sigma*delta = ln 2, so the
        // single sample absorbs exactly half the ray.
        let mut f = RadianceField::new(Aabb::cube(Vector3::zeros(), 10.0), [2, 2, 2]).unwrap();
        f.raw_density.fill(0.0);
        for node in 0..f.n_nodes() {
            f.raw_color[3 * node] = 1e9; // sigmoid -> 1
            f.raw_color[3 * node + 1] = -1e9; // sigmoid -> 0
            f.raw_color[3 * node + 2] = -1e9;
        }
        let cfg = TrainConfig {
            n_samples: 1,
            t_near: 0.0,
            t_far: 2.0,
            background: [0.0, 0.0, 0.0],
            stratified: false,
            ..TrainConfig::default()
        };
        let ray = Ray {
            origin: Vector3::new(-1.0, 0.0, 0.0),
            direction: Vector3::x(),
        };
        let trace = render_ray(&f, &ray, &cfg, None);
        assert_abs_diff_eq!(trace.weight[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(trace.color_out[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(trace.color_out[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn opaque_first_sample_saturates() {
        let mut f = RadianceField::new(Aabb::cube(Vector3::zeros(), 10.0), [2, 2, 2]).unwrap();
        // sigma * delta = 50 on the first sample: softplus(50) = 50 and the
        // sample spacing below is 1.
        f.raw_density.fill(50.0);
        for node in 0..f.n_nodes() {
            f.raw_color[3 * node] = 1e9;
            f.raw_color[3 * node + 1] = -1e9;
            f.raw_color[3 * node + 2] = -1e9;
        }
        let cfg = TrainConfig {
            n_samples: 4,
            t_near: 0.0,
            t_far: 4.0,
            background: [0.0, 0.0, 0.0],
            stratified: false,
            ..TrainConfig::default()
        };
        let ray = Ray {
            origin: Vector3::new(-2.0, 0.0, 0.0),
            direction: Vector3::x(),
        };
        let trace = render_ray(&f, &ray, &cfg, None);
        assert!(trace.weight[0] >= 1.0 - 1e-20);
        assert_abs_diff_eq!(trace.color_out[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn ray_trace_invariants_hold() {
        let mut f = small_field();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for v in f.raw_density.iter_mut() {
            *v = rng.random_range(-3.0..3.0);
        }
        for v in f.raw_color.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let cfg = eval_cfg(64);
        for _ in 0..50 {
            let origin = Vector3::new(
                rng.random_range(-2.5..2.5),
                rng.random_range(-2.5..2.5),
                rng.random_range(-2.5..2.5),
            );
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let trace = render_ray(&f, &Ray { origin, direction: dir }, &cfg, None);
            // T_1 = 1 and the recurrence T_{i+1} = T_i exp(-sigma_i delta_i).
            assert_eq!(trace.transmittance[0], 1.0);
            for i in 0..cfg.n_samples - 1 {
                let expected =
                    trace.transmittance[i] * (-trace.sigma[i] * trace.delta[i]).exp();
                let t_next = trace.transmittance[i + 1];
                assert!((t_next - expected).abs() <= 1e-9 * expected.max(1e-300));
            }
            // Telescoping mass balance.
            let total: f64 = trace.weight.iter().sum();
            assert_abs_diff_eq!(total + trace.final_transmittance, 1.0, epsilon = 1e-6);
            assert!(trace.weight.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn render_image_is_deterministic_and_downsampled() {
        let f = empty_field();
        let cam = CameraIntrinsics::new(100, 100, 1.0).unwrap();
        let pose = Pose::look_at(Vector3::new(2.0, 0.0, 1.0), Vector3::zeros()).unwrap();
        let cfg = TrainConfig {
            background: [1.0, 1.0, 1.0],
            ..TrainConfig::default()
        };
        let img = render_image(&f, &cam, &pose, &cfg, 4).unwrap();
        assert_eq!((img.width, img.height), (25, 25));
        assert!(img.pixels.iter().all(|&p| p == [1.0, 1.0, 1.0]));
        let again = render_image(&f, &cam, &pose, &cfg, 4).unwrap();
        assert_eq!(img, again);
    }

    #[test]
    fn gradient_is_zero_at_a_perfect_fit() {
        let mut f = small_field();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in f.raw_density.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let cfg = eval_cfg(32);
        let rays: Vec<Ray> = (0..8)
            .map(|i| Ray {
                origin: Vector3::new(-2.0, -0.7 + 0.2 * i as f64, 0.1),
                direction: Vector3::x(),
            })
            .collect();
        let gt: Vec<[f64; 3]> = rays
            .iter()
            .map(|r| render_ray(&f, r, &cfg, None).color_out)
            .collect();
        let (mse, grads) = loss_and_gradients(&f, &rays, &gt, &cfg, None).unwrap();
        assert!(mse < 1e-24);
        assert!(grads.d_density.iter().all(|g| g.abs() < 1e-12));
        assert!(grads.d_color.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn empty_field_fits_background_exactly() {
        let f = empty_field();
        let cfg = TrainConfig {
            background: [1.0, 1.0, 1.0],
            stratified: false,
            ..TrainConfig::default()
        };
        let rays = vec![Ray {
            origin: Vector3::new(-2.0, 0.0, 0.0),
            direction: Vector3::x(),
        }];
        let (mse, _) = loss_and_gradients(&f, &rays, &[[1.0, 1.0, 1.0]], &cfg, None).unwrap();
        assert_eq!(mse, 0.0);
        assert!(loss_and_gradients(&f, &rays, &[], &cfg, None).is_err());
    }

    /// Central finite differences over every parameter of a tiny field; the
    /// independent oracle for the analytic gradients.
    fn finite_difference_check(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = RadianceField::new(Aabb::cube(Vector3::zeros(), 2.0), [4, 4, 4]).unwrap();
        for v in f.raw_density.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        for v in f.raw_color.iter_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
        let cfg = TrainConfig {
            n_samples: 16,
            t_near: 0.2,
            t_far: 3.8,
            background: [0.7, 0.4, 0.2],
            stratified: false,
            ..TrainConfig::default()
        };
        let rays: Vec<Ray> = (0..6)
            .map(|_| {
                let origin = Vector3::new(
                    rng.random_range(-2.2..-1.8),
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                );
                let aim = Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                );
                Ray {
                    origin,
                    direction: (aim - origin).normalize(),
                }
            })
            .collect();
        let gt: Vec<[f64; 3]> = (0..rays.len())
            .map(|_| {
                [
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();

        let (_, grads) = loss_and_gradients(&f, &rays, &gt, &cfg, None).unwrap();

        let h = 1e-4;
        let loss_with = |density_idx: Option<usize>, color_idx: Option<usize>, delta: f64| {
            let mut g = f.clone();
            if let Some(i) = density_idx {
                g.raw_density[i] += delta;
            }
            if let Some(i) = color_idx {
                g.raw_color[i] += delta;
            }
            loss_and_gradients(&g, &rays, &gt, &cfg, None).unwrap().0
        };
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            if analytic.abs() > 1e-8 {
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
                assert!(
                    rel < 1e-4,
                    "{what}: analytic {analytic:.3e} vs fd {fd:.3e} (rel {rel:.2e})"
                );
            }
        };

        for i in 0..f.raw_density.len() {
            check(
                grads.d_density[i],
                loss_with(Some(i), None, h),
                loss_with(Some(i), None, -h),
                "density",
            );
        }
        for i in 0..f.raw_color.len() {
            check(
                grads.d_color[i],
                loss_with(None, Some(i), h),
                loss_with(None, Some(i), -h),
                "color",
            );
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        finite_difference_check(12345);
    }

    #[test]
    fn zero_steps_leaves_parameters_untouched() {
        let mut f = small_field();
        let before = f.clone();
        let cam = CameraIntrinsics::new(8, 8, 1.0).unwrap();
        let pose = Pose::look_at(Vector3::new(2.0, 0.0, 1.0), Vector3::zeros()).unwrap();
        let img = Image::constant(8, 8, [1.0, 1.0, 1.0]);
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        train(&mut f, &cam, &[(pose, img)], &cfg).unwrap();
        assert_eq!(f, before);

        assert!(train(&mut f, &cam, &[], &cfg).is_err());
    }

    #[test]
    fn training_reduces_the_loss() {
        // Fit a tiny field to a black-sphere-on-white scene rendered from two
        // views; the loss at step 1000 must be below the loss at step 10.
        use crate::scene::{render_ground_truth, scene_preset};
        let scene = scene_preset("sphere").unwrap();
        let cam = CameraIntrinsics::new(40, 40, 1.0).unwrap();
        let poses: Vec<Pose> = [0.0_f64, 2.1]
            .iter()
            .map(|&az| {
                Pose::look_at(
                    Vector3::new(2.0 * az.cos(), 2.0 * az.sin(), 1.0),
                    Vector3::zeros(),
                )
                .unwrap()
            })
            .collect();
        let images: Vec<(Pose, Image)> = poses
            .into_iter()
            .map(|p| {
                let img = render_ground_truth(&scene, &cam, &p, [1.0, 1.0, 1.0], 1).unwrap();
                (p, img)
            })
            .collect();
        let mut f = RadianceField::new(Aabb::cube(Vector3::zeros(), 2.4), [16, 16, 16]).unwrap();
        let cfg = TrainConfig {
            steps: 1000,
            rays_per_batch: 256,
            log_every: 10,
            seed: 9,
            ..TrainConfig::default()
        };
        let report = train(&mut f, &cam, &images, &cfg).unwrap();
        let at = |step: usize| {
            report
                .entries
                .iter()
                .find(|e| e.step == step)
                .expect("log entry")
                .mse
        };
        assert!(
            at(1000) < at(10),
            "loss did not decrease: {} vs {}",
            at(1000),
            at(10)
        );
        // PSNR consistency.
        for e in &report.entries {
            assert_abs_diff_eq!(e.psnr, -10.0 * e.mse.log10(), epsilon = 1e-9);
        }
    }

    #[test]
    fn density_export_matches_spec_protocol() {
        let f = empty_field();
        let grid = density_grid_export(&f, 16, 2.4, Vector3::zeros()).unwrap();
        assert_eq!(grid.values.len(), 16 * 16 * 16);
        assert!(grid.values.iter().all(|&v| v == 0.0));
        let lo = grid.position(0, 0, 0);
        let hi = grid.position(15, 15, 15);
        let h = 2.4 / 16.0;
        for a in 0..3 {
            assert!(lo[a] >= -1.2 && lo[a] <= -1.2 + h);
            assert!(hi[a] <= 1.2 && hi[a] >= 1.2 - h);
        }
        assert!(density_grid_export(&f, 4, 2.4, Vector3::zeros()).is_err());
    }
}

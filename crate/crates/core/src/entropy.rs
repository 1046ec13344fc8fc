//! Ray-based volumetric uncertainty: Shannon entropy of the per-ray weight
//! distribution, per-view entropy maps, and per-view mean scores.
//!
//! The discrete weights of a ray rarely sum to one away from surfaces, so
//! they are normalized before the entropy is taken. Rays whose total weight
//! falls below an opacity floor are background: the field is confident they
//! hit nothing, and by default they contribute zero entropy rather than the
//! spuriously near-maximal entropy of their normalized residue.

use crate::error::{Error, Result};
use crate::field::{render_ray, RadianceField, TrainConfig};
use crate::geometry::{camera_rays, CameraIntrinsics, Pose};
use rayon::prelude::*;

/// What a ray with total weight below the opacity floor reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundMode {
    /// Confident empty space: entropy 0 (default).
    ZeroEntropy,
    /// Worst-case reading: entropy ln N.
    MaxEntropy,
    /// Report 0 and rely on an opacity-masked mean to drop the pixel.
    Exclude,
}

/// Which pixels enter a view's mean entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanMode {
    AllPixels,
    /// Only pixels with opacity at or above the floor; 0 if none qualify.
    OpacityMasked,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyOptions {
    /// Guard floor when the opacity floor is configured to zero.
    pub epsilon: f64,
    /// Opacity floor below which a ray counts as background.
    pub tau_bg: f64,
    pub background: BackgroundMode,
    pub mean: MeanMode,
}

impl Default for EntropyOptions {
    fn default() -> Self {
        EntropyOptions {
            epsilon: 1e-10,
            tau_bg: 0.1,
            background: BackgroundMode::ZeroEntropy,
            mean: MeanMode::AllPixels,
        }
    }
}

impl EntropyOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_bg) {
            return Err(Error::invalid("tau_bg must lie in [0, 1]"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Shannon entropy (nats) of the normalized weight distribution, Eq. 7 of
/// the estimator: `-sum p_i ln p_i` with `p_i = w_i / sum(w)` and
/// `0 ln 0 := 0`. Background rays (see [`BackgroundMode`]) short-circuit.
pub fn ray_entropy(weights: &[f64], opts: &EntropyOptions) -> Result<f64> {
    if weights.iter().any(|&w| w < 0.0 || w.is_nan()) {
        return Err(Error::invalid("ray weights must be non-negative"));
    }
    if weights.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = weights.iter().sum();
    if total < opts.tau_bg.max(opts.epsilon) {
        return Ok(match opts.background {
            BackgroundMode::ZeroEntropy | BackgroundMode::Exclude => 0.0,
            BackgroundMode::MaxEntropy => (weights.len() as f64).ln(),
        });
    }
    let mut h = 0.0;
    for &w in weights {
        if w > 0.0 {
            let p = w / total;
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Per-pixel ray entropies and opacities for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub width: u32,
    pub height: u32,
    /// Row-major entropies in nats, each in [0, ln N].
    pub entropy: Vec<f64>,
    /// Row-major total weight mass per ray, in [0, 1].
    pub opacity: Vec<f64>,
}

impl EntropyMap {
    pub fn pixel(&self, row: u32, col: u32) -> (f64, f64) {
        let i = (row * self.width + col) as usize;
        (self.entropy[i], self.opacity[i])
    }
}

/// Renders every downsampled pixel's ray (jitter-free, deterministic) and
/// scores it with [`ray_entropy`].
pub fn entropy_map(
    field: &RadianceField,
    cam: &CameraIntrinsics,
    pose: &Pose,
    cfg: &TrainConfig,
    downsample: u32,
    opts: &EntropyOptions,
) -> Result<EntropyMap> {
    opts.validate()?;
    let rays = camera_rays(cam, pose, downsample)?;
    let scored: Vec<(f64, f64)> = rays
        .par_iter()
        .map(|ray| {
            let trace = render_ray(field, ray, cfg, None);
            let h = ray_entropy(&trace.weight, opts).expect("renderer weights are non-negative");
            (h, trace.opacity)
        })
        .collect();
    let (entropy, opacity) = scored.into_iter().unzip();
    Ok(EntropyMap {
        width: cam.width / downsample,
        height: cam.height / downsample,
        entropy,
        opacity,
    })
}

/// Reduces a map to the view's representative score.
pub fn view_mean_entropy(map: &EntropyMap, opts: &EntropyOptions) -> Result<f64> {
    if map.entropy.is_empty() {
        return Err(Error::invalid("entropy map is empty"));
    }
    match opts.mean {
        MeanMode::AllPixels => {
            Ok(map.entropy.iter().sum::<f64>() / map.entropy.len() as f64)
        }
        MeanMode::OpacityMasked => {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (h, o) in map.entropy.iter().zip(map.opacity.iter()) {
                if *o >= opts.tau_bg {
                    sum += h;
                    count += 1;
                }
            }
            Ok(if count == 0 { 0.0 } else { sum / count as f64 })
        }
    }
}

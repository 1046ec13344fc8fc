//! Next-best-view selection policies: the uncertainty-guided
//! region-clustering policy, its baselines, and the two entropy ablations,
//! behind one dispatch interface.
//!
//! All ties break toward the lowest view id, and every policy is a pure
//! function of `(state, seed, options)`.

use crate::entropy::{entropy_map, view_mean_entropy, EntropyOptions};
use crate::error::{Error, Result};
use crate::field::{render_image, RadianceField, TrainConfig};
use crate::geometry::{spherical_distance, CameraIntrinsics, RegionClustering, ViewSpace};
use crate::scene::{render_ground_truth, Image, SdfScene};
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    RegionEntropy,
    RandomSection,
    Heuristic,
    Similarity,
    SimilarityGt,
    PureRandom,
    TopkEntropy,
    EntropyDistance,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::RegionEntropy => "region-entropy",
            Policy::RandomSection => "random-section",
            Policy::Heuristic => "heuristic",
            Policy::Similarity => "similarity",
            Policy::SimilarityGt => "similarity-gt",
            Policy::PureRandom => "pure-random",
            Policy::TopkEntropy => "topk-entropy",
            Policy::EntropyDistance => "entropy-distance",
        }
    }

    pub fn parse(name: &str) -> Result<Policy> {
        Ok(match name {
            "region-entropy" => Policy::RegionEntropy,
            "random-section" => Policy::RandomSection,
            "heuristic" => Policy::Heuristic,
            "similarity" => Policy::Similarity,
            "similarity-gt" => Policy::SimilarityGt,
            "pure-random" => Policy::PureRandom,
            "topk-entropy" => Policy::TopkEntropy,
            "entropy-distance" => Policy::EntropyDistance,
            other => {
                return Err(Error::invalid(format!("unknown policy '{other}'")));
            }
        })
    }

    pub const ALL: [Policy; 8] = [
        Policy::RegionEntropy,
        Policy::RandomSection,
        Policy::Heuristic,
        Policy::Similarity,
        Policy::SimilarityGt,
        Policy::PureRandom,
        Policy::TopkEntropy,
        Policy::EntropyDistance,
    ];
}

/// Everything a policy may consult. Policies never mutate the state.
pub struct PolicyState<'a> {
    pub field: &'a RadianceField,
    pub views: &'a ViewSpace,
    pub clustering: &'a RegionClustering,
    pub training_ids: &'a BTreeSet<u32>,
    pub candidate_ids: &'a BTreeSet<u32>,
    pub seed: u64,
    /// Ground-truth scene, required by GT-based baselines only.
    pub scene: Option<&'a SdfScene>,
    pub cam: &'a CameraIntrinsics,
    pub render_cfg: &'a TrainConfig,
    pub entropy_opts: &'a EntropyOptions,
    pub downsample: u32,
    /// Already-acquired images, downsampled to the policy resolution;
    /// consulted by the similarity baselines.
    pub training_images: &'a [Image],
}

impl PolicyState<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_ids.is_empty() {
            return Err(Error::invalid("candidate pool is empty"));
        }
        if !self.training_ids.is_disjoint(self.candidate_ids) {
            return Err(Error::invalid(
                "training ids and candidate ids must be disjoint",
            ));
        }
        if self.training_ids.len() + self.candidate_ids.len() != self.views.views.len() {
            return Err(Error::invalid(
                "training and candidate ids must partition the view space",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub view_id: u32,
    pub section: Option<u32>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub policy: String,
    pub chosen: Vec<u32>,
    pub scores: Vec<ScoreRow>,
}

impl Selection {
    fn new(policy: Policy, chosen: Vec<u32>, scores: Vec<ScoreRow>) -> Selection {
        Selection {
            policy: policy.name().to_string(),
            chosen,
            scores,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyOptions {
    /// Selection count for policies that are not one-per-section.
    pub k: usize,
    /// Entropy/distance trade-off weight of the distance ablation.
    pub lambda: f64,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        PolicyOptions { k: 12, lambda: 0.5 }
    }
}

/// Dispatches to the named policy.
pub fn select_next_views(
    policy: Policy,
    state: &PolicyState,
    opts: &PolicyOptions,
) -> Result<Selection> {
    state.validate()?;
    match policy {
        Policy::RegionEntropy => policy_region_entropy(state),
        Policy::RandomSection => policy_random_per_section(state),
        Policy::Heuristic => policy_heuristic_middle(state),
        Policy::Similarity => policy_similarity(state, false),
        Policy::SimilarityGt => policy_similarity(state, true),
        Policy::PureRandom => policy_pure_random(state, opts.k),
        Policy::TopkEntropy => policy_topk_entropy(state, opts.k),
        Policy::EntropyDistance => policy_entropy_distance(state, opts.k, opts.lambda),
    }
}

/// Sections restricted to the remaining candidates, ascending section id.
/// Errors if any section has no candidate left.
fn candidate_sections(state: &PolicyState) -> Result<Vec<(u32, Vec<u32>)>> {
    let mut out = Vec::with_capacity(state.clustering.sections.len());
    for (section, members) in &state.clustering.sections {
        let remaining: Vec<u32> = members
            .iter()
            .copied()
            .filter(|id| state.candidate_ids.contains(id))
            .collect();
        if remaining.is_empty() {
            return Err(Error::invalid(format!(
                "section {section} has no remaining candidates"
            )));
        }
        out.push((*section, remaining));
    }
    Ok(out)
}

/// Mean ray entropy of each listed candidate view, rendered at the policy
/// resolution. Parallel over candidates, deterministic.
pub fn candidate_entropy_scores(
    state: &PolicyState,
    ids: &[u32],
) -> Result<BTreeMap<u32, f64>> {
    let scores: Result<Vec<(u32, f64)>> = ids
        .par_iter()
        .map(|&id| {
            let view = state
                .views
                .view(id)
                .ok_or_else(|| Error::invalid(format!("unknown view id {id}")))?;
            let map = entropy_map(
                state.field,
                state.cam,
                &view.pose,
                state.render_cfg,
                state.downsample,
                state.entropy_opts,
            )?;
            Ok((id, view_mean_entropy(&map, state.entropy_opts)?))
        })
        .collect();
    Ok(scores?.into_iter().collect())
}

/// Per-section argmax with ties broken toward the lowest id.
fn argmax_per_section(
    sections: &[(u32, Vec<u32>)],
    scores: &BTreeMap<u32, f64>,
) -> (Vec<u32>, Vec<ScoreRow>) {
    let mut chosen = Vec::with_capacity(sections.len());
    let mut rows = Vec::new();
    for (section, members) in sections {
        let mut best: Option<(u32, f64)> = None;
        for &id in members {
            let s = scores[&id];
            rows.push(ScoreRow {
                view_id: id,
                section: Some(*section),
                score: s,
            });
            // Strictly-greater keeps the lowest id on ties (members ascend).
            if best.map_or(true, |(_, bs)| s > bs) {
                best = Some((id, s));
            }
        }
        chosen.push(best.expect("sections are non-empty").0);
    }
    (chosen, rows)
}

/// The uncertainty-guided policy: the highest mean-entropy candidate of
/// every section.
pub fn policy_region_entropy(state: &PolicyState) -> Result<Selection> {
    let sections = candidate_sections(state)?;
    let ids: Vec<u32> = sections.iter().flat_map(|(_, m)| m.iter().copied()).collect();
    let scores = candidate_entropy_scores(state, &ids)?;
    let (chosen, rows) = argmax_per_section(&sections, &scores);
    Ok(Selection::new(Policy::RegionEntropy, chosen, rows))
}

/// `k` uniform draws without replacement over the entire candidate pool.
pub fn policy_pure_random(state: &PolicyState, k: usize) -> Result<Selection> {
    let pool: Vec<u32> = state.candidate_ids.iter().copied().collect();
    if k > pool.len() {
        return Err(Error::invalid(format!(
            "cannot draw {k} views from {} candidates",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
    let chosen = rand::seq::index::sample(&mut rng, pool.len(), k)
        .iter()
        .map(|i| pool[i])
        .collect();
    Ok(Selection::new(Policy::PureRandom, chosen, Vec::new()))
}

/// One uniform draw per section.
pub fn policy_random_per_section(state: &PolicyState) -> Result<Selection> {
    let sections = candidate_sections(state)?;
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
    let chosen = sections
        .iter()
        .map(|(_, members)| members[rng.random_range(0..members.len())])
        .collect();
    Ok(Selection::new(Policy::RandomSection, chosen, Vec::new()))
}

fn elevation_azimuth(state: &PolicyState, id: u32) -> (f64, f64) {
    let view = state.views.view(id).expect("view id out of range");
    let rel = view.pose.position - state.views.target;
    let elevation = (rel.z / rel.norm()).asin();
    (elevation, view.azimuth)
}

/// The pose closest to each section's (mean elevation, mean azimuth)
/// centroid. Seed-independent.
pub fn policy_heuristic_middle(state: &PolicyState) -> Result<Selection> {
    let sections = candidate_sections(state)?;
    let mut chosen = Vec::with_capacity(sections.len());
    let mut rows = Vec::new();
    for (section, candidates) in &sections {
        // Centroid over the full section, not just remaining candidates.
        let members = &state
            .clustering
            .sections
            .iter()
            .find(|(s, _)| s == section)
            .expect("section exists")
            .1;
        let n = members.len() as f64;
        let (mut mean_el, mut mean_az) = (0.0, 0.0);
        for &id in members {
            let (el, az) = elevation_azimuth(state, id);
            mean_el += el / n;
            mean_az += az / n;
        }
        let centroid = Vector3::new(
            mean_el.cos() * mean_az.cos(),
            mean_el.cos() * mean_az.sin(),
            mean_el.sin(),
        );
        let mut best: Option<(u32, f64)> = None;
        for &id in candidates {
            let rel = (state.views.view(id).unwrap().pose.position - state.views.target)
                .normalize();
            let angle = rel.cross(&centroid).norm().atan2(rel.dot(&centroid));
            rows.push(ScoreRow {
                view_id: id,
                section: Some(*section),
                score: angle,
            });
            if best.map_or(true, |(_, ba)| angle < ba) {
                best = Some((id, angle));
            }
        }
        chosen.push(best.expect("sections are non-empty").0);
    }
    Ok(Selection::new(Policy::Heuristic, chosen, rows))
}

/// Fixed-length visual descriptor: 8x8 mean-pooled RGB cells plus a
/// 16-bin-per-channel color histogram, L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    pub vector: Vec<f64>,
}

impl ImageFeature {
    pub fn is_blank(&self) -> bool {
        self.vector.iter().all(|&v| v == 0.0)
    }
}

pub const FEATURE_LEN: usize = 8 * 8 * 3 + 3 * 16;

pub fn image_feature(img: &Image) -> ImageFeature {
    let mut vector = vec![0.0_f64; FEATURE_LEN];
    if img.pixels.is_empty() {
        return ImageFeature { vector };
    }
    let mut cell_count = [0usize; 64];
    let inv_n = 1.0 / img.pixels.len() as f64;
    for row in 0..img.height {
        let cr = (row as usize * 8) / img.height as usize;
        for col in 0..img.width {
            let cc = (col as usize * 8) / img.width as usize;
            let cell = cr * 8 + cc;
            let px = img.pixel(row, col);
            cell_count[cell] += 1;
            for ch in 0..3 {
                vector[cell * 3 + ch] += px[ch];
                let bin = ((px[ch] * 16.0) as usize).min(15);
                vector[192 + ch * 16 + bin] += inv_n;
            }
        }
    }
    for cell in 0..64 {
        if cell_count[cell] > 0 {
            for ch in 0..3 {
                vector[cell * 3 + ch] /= cell_count[cell] as f64;
            }
        }
    }
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in vector.iter_mut() {
            *v /= norm;
        }
    }
    ImageFeature { vector }
}

/// Cosine similarity of two features; 0 when either is blank.
pub fn cosine(a: &ImageFeature, b: &ImageFeature) -> f64 {
    a.vector
        .iter()
        .zip(b.vector.iter())
        .map(|(x, y)| x * y)
        .sum()
}

/// The visual-novelty baseline: per section, the candidate whose rendered
/// (or ground-truth) image is least similar to the closest training image.
pub fn policy_similarity(state: &PolicyState, use_ground_truth: bool) -> Result<Selection> {
    if state.training_images.is_empty() {
        return Err(Error::invalid(
            "similarity policy needs at least one training image",
        ));
    }
    let scene = if use_ground_truth {
        Some(state.scene.ok_or_else(|| {
            Error::invalid("similarity-gt needs a ground-truth scene handle")
        })?)
    } else {
        None
    };
    let training_features: Vec<ImageFeature> =
        state.training_images.iter().map(image_feature).collect();

    let sections = candidate_sections(state)?;
    let ids: Vec<u32> = sections.iter().flat_map(|(_, m)| m.iter().copied()).collect();
    let similarity: Result<Vec<(u32, f64)>> = ids
        .par_iter()
        .map(|&id| {
            let view = state.views.view(id).expect("view id out of range");
            let img = match scene {
                Some(scene) => render_ground_truth(
                    scene,
                    state.cam,
                    &view.pose,
                    state.render_cfg.background,
                    state.downsample,
                )?,
                None => render_image(
                    state.field,
                    state.cam,
                    &view.pose,
                    state.render_cfg,
                    state.downsample,
                )?,
            };
            let feature = image_feature(&img);
            let score = training_features
                .iter()
                .map(|t| cosine(&feature, t))
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((id, score))
        })
        .collect();
    let similarity: BTreeMap<u32, f64> = similarity?.into_iter().collect();

    let mut chosen = Vec::with_capacity(sections.len());
    let mut rows = Vec::new();
    for (section, members) in &sections {
        let mut best: Option<(u32, f64)> = None;
        for &id in members {
            let s = similarity[&id];
            rows.push(ScoreRow {
                view_id: id,
                section: Some(*section),
                score: s,
            });
            if best.map_or(true, |(_, bs)| s < bs) {
                best = Some((id, s));
            }
        }
        chosen.push(best.expect("sections are non-empty").0);
    }
    let policy = if use_ground_truth {
        Policy::SimilarityGt
    } else {
        Policy::Similarity
    };
    Ok(Selection::new(policy, chosen, rows))
}

fn top_k_by_score(scores: &BTreeMap<u32, f64>, k: usize) -> Vec<u32> {
    let mut ranked: Vec<(u32, f64)> = scores.iter().map(|(&id, &s)| (id, s)).collect();
    // Descending score; BTreeMap order already ascends by id for ties.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(id, _)| id).collect()
}

/// Ablation (i): the k most uncertain candidates globally, sections ignored.
pub fn policy_topk_entropy(state: &PolicyState, k: usize) -> Result<Selection> {
    if k > state.candidate_ids.len() {
        return Err(Error::invalid(format!(
            "cannot select top {k} from {} candidates",
            state.candidate_ids.len()
        )));
    }
    let ids: Vec<u32> = state.candidate_ids.iter().copied().collect();
    let scores = candidate_entropy_scores(state, &ids)?;
    let chosen = top_k_by_score(&scores, k);
    let rows = scores
        .iter()
        .map(|(&view_id, &score)| ScoreRow {
            view_id,
            section: state.clustering.section_of(view_id),
            score,
        })
        .collect();
    Ok(Selection::new(Policy::TopkEntropy, chosen, rows))
}

/// Greedy diversity selection on normalized entropies and pairwise
/// spherical distances. Exactly reduces to top-k when `lambda` is 0.
pub fn greedy_entropy_distance(
    norm_scores: &BTreeMap<u32, f64>,
    positions: &BTreeMap<u32, Vector3<f64>>,
    target: Vector3<f64>,
    k: usize,
    lambda: f64,
) -> Result<Vec<u32>> {
    if k > norm_scores.len() {
        return Err(Error::invalid(format!(
            "cannot select {k} from {} candidates",
            norm_scores.len()
        )));
    }
    let mut chosen: Vec<u32> = Vec::with_capacity(k);
    let mut remaining: BTreeSet<u32> = norm_scores.keys().copied().collect();
    while chosen.len() < k {
        let mut best: Option<(u32, f64)> = None;
        for &id in &remaining {
            let mut value = norm_scores[&id];
            if lambda != 0.0 && !chosen.is_empty() {
                let pose_a = crate::geometry::Pose {
                    position: positions[&id],
                    rotation: nalgebra::Matrix3::identity(),
                };
                let min_dist = chosen
                    .iter()
                    .map(|c| {
                        let pose_b = crate::geometry::Pose {
                            position: positions[c],
                            rotation: nalgebra::Matrix3::identity(),
                        };
                        spherical_distance(&pose_a, &pose_b, target).unwrap_or(0.0)
                    })
                    .fold(f64::INFINITY, f64::min);
                value += lambda * min_dist / std::f64::consts::PI;
            }
            if best.map_or(true, |(_, bv)| value > bv) {
                best = Some((id, value));
            }
        }
        let (id, _) = best.expect("remaining is non-empty");
        chosen.push(id);
        remaining.remove(&id);
    }
    Ok(chosen)
}

/// Ablation (ii): greedy `normalized_entropy + lambda * min spherical
/// distance to the already-chosen poses / pi`.
pub fn policy_entropy_distance(state: &PolicyState, k: usize, lambda: f64) -> Result<Selection> {
    let ids: Vec<u32> = state.candidate_ids.iter().copied().collect();
    let scores = candidate_entropy_scores(state, &ids)?;
    let ln_n = (state.render_cfg.n_samples as f64).ln();
    let norm_scores: BTreeMap<u32, f64> =
        scores.iter().map(|(&id, &s)| (id, s / ln_n)).collect();
    let positions: BTreeMap<u32, Vector3<f64>> = ids
        .iter()
        .map(|&id| (id, state.views.view(id).unwrap().pose.position))
        .collect();
    let chosen = greedy_entropy_distance(
        &norm_scores,
        &positions,
        state.views.target,
        k,
        lambda,
    )?;
    let rows = scores
        .iter()
        .map(|(&view_id, &score)| ScoreRow {
            view_id,
            section: state.clustering.section_of(view_id),
            score,
        })
        .collect();
    Ok(Selection::new(Policy::EntropyDistance, chosen, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Aabb;
    use crate::geometry::{cluster_regions, default_elevations, generate_view_space};
    use crate::scene::scene_preset;

    struct Fixture {
        field: RadianceField,
        views: ViewSpace,
        clustering: RegionClustering,
        training: BTreeSet<u32>,
        candidates: BTreeSet<u32>,
        cam: CameraIntrinsics,
        cfg: TrainConfig,
        opts: EntropyOptions,
        scene: SdfScene,
        training_images: Vec<Image>,
    }

    impl Fixture {
        fn new() -> Fixture {
            let views =
                generate_view_space(3, 6, &default_elevations(3), 2.0, Vector3::zeros()).unwrap();
            let clustering = cluster_regions(&views, 3).unwrap();
            let mut field =
                RadianceField::new(Aabb::cube(Vector3::zeros(), 2.4), [8, 8, 8]).unwrap();
            field.raw_density.fill(-1e9);
            let cam = CameraIntrinsics::new(24, 24, 1.0).unwrap();
            let cfg = TrainConfig {
                n_samples: 16,
                stratified: false,
                ..TrainConfig::default()
            };
            let scene = scene_preset("sphere").unwrap();
            // Train on one middle-circle view; everything else is a candidate.
            let training: BTreeSet<u32> = [6u32].into_iter().collect();
            let candidates: BTreeSet<u32> = (0..18u32).filter(|id| *id != 6).collect();
            let pose = views.view(6).unwrap().pose.clone();
            let img = render_ground_truth(&scene, &cam, &pose, [1.0, 1.0, 1.0], 2).unwrap();
            Fixture {
                field,
                views,
                clustering,
                training,
                candidates,
                cam,
                cfg,
                opts: EntropyOptions::default(),
                scene,
                training_images: vec![img],
            }
        }

        fn state(&self) -> PolicyState<'_> {
            PolicyState {
                field: &self.field,
                views: &self.views,
                clustering: &self.clustering,
                training_ids: &self.training,
                candidate_ids: &self.candidates,
                seed: 7,
                scene: Some(&self.scene),
                cam: &self.cam,
                render_cfg: &self.cfg,
                entropy_opts: &self.opts,
                downsample: 2,
                training_images: &self.training_images,
            }
        }
    }

    #[test]
    fn state_validation_catches_overlap() {
        let fx = Fixture::new();
        let mut bad_training = fx.training.clone();
        bad_training.insert(3);
        let mut state = fx.state();
        state.training_ids = &bad_training;
        assert!(state.validate().is_err());
    }

    #[test]
    fn region_entropy_on_flat_scores_picks_lowest_ids() {
        let fx = Fixture::new();
        let sel = policy_region_entropy(&fx.state()).unwrap();
        // Zero-density field: every candidate scores 0, ties resolve to the
        // lowest id in each section.
        assert_eq!(sel.chosen.len(), 6);
        for ((section, members), &chosen) in
            fx.clustering.sections.iter().zip(sel.chosen.iter())
        {
            let expected = members
                .iter()
                .copied()
                .filter(|id| fx.candidates.contains(id))
                .min()
                .unwrap();
            assert_eq!(chosen, expected, "section {section}");
        }
        assert!(sel.chosen.iter().all(|id| !fx.training.contains(id)));
        // Every section candidate is scored (12 non-middle views, all free).
        assert_eq!(sel.scores.len(), 12);
    }

    #[test]
    fn argmax_per_section_prefers_high_scores_then_low_ids() {
        let sections = vec![(0u32, vec![1u32, 2]), (1u32, vec![5u32, 9])];
        let scores: BTreeMap<u32, f64> =
            [(1, 0.5), (2, 0.9), (5, 0.7), (9, 0.7)].into_iter().collect();
        let (chosen, _) = argmax_per_section(&sections, &scores);
        assert_eq!(chosen, vec![2, 5]);

        // Argmax is invariant to positive rescaling.
        let scaled: BTreeMap<u32, f64> =
            scores.iter().map(|(&k, &v)| (k, v * 37.5)).collect();
        let (chosen_scaled, _) = argmax_per_section(&sections, &scaled);
        assert_eq!(chosen, chosen_scaled);
    }

    #[test]
    fn pure_random_is_seeded_and_exhaustive() {
        let fx = Fixture::new();
        let all = policy_pure_random(&fx.state(), fx.candidates.len()).unwrap();
        let got: BTreeSet<u32> = all.chosen.iter().copied().collect();
        assert_eq!(got, fx.candidates);

        let none = policy_pure_random(&fx.state(), 0).unwrap();
        assert!(none.chosen.is_empty());

        let a = policy_pure_random(&fx.state(), 5).unwrap();
        let b = policy_pure_random(&fx.state(), 5).unwrap();
        assert_eq!(a.chosen, b.chosen);
        assert!(policy_pure_random(&fx.state(), 99).is_err());
    }

    #[test]
    fn random_per_section_stays_in_sections() {
        let fx = Fixture::new();
        let sel = policy_random_per_section(&fx.state()).unwrap();
        assert_eq!(sel.chosen.len(), 6);
        for ((section, members), &chosen) in
            fx.clustering.sections.iter().zip(sel.chosen.iter())
        {
            assert!(members.contains(&chosen), "section {section}");
        }
        let again = policy_random_per_section(&fx.state()).unwrap();
        assert_eq!(sel.chosen, again.chosen);
    }

    #[test]
    fn heuristic_picks_central_poses_independent_of_seed() {
        let fx = Fixture::new();
        let sel = policy_heuristic_middle(&fx.state()).unwrap();
        let mut other_state = fx.state();
        other_state.seed = 12345;
        let other = policy_heuristic_middle(&other_state).unwrap();
        assert_eq!(sel.chosen, other.chosen);
        for ((_, members), &chosen) in fx.clustering.sections.iter().zip(sel.chosen.iter()) {
            let candidates: Vec<u32> = members
                .iter()
                .copied()
                .filter(|id| fx.candidates.contains(id))
                .collect();
            assert!(candidates.contains(&chosen));
        }
    }

    #[test]
    fn feature_laws() {
        let img = Image::constant(16, 16, [0.3, 0.6, 0.9]);
        let f = image_feature(&img);
        assert!((f.vector.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((cosine(&f, &f) - 1.0).abs() < 1e-9);
        // All pooled cells of a constant image are equal.
        for cell in 1..64 {
            for ch in 0..3 {
                assert_eq!(f.vector[cell * 3 + ch], f.vector[ch]);
            }
        }
        // Black vs white: disjoint pooled support and disjoint histograms.
        let black = image_feature(&Image::constant(8, 8, [0.0, 0.0, 0.0]));
        let white = image_feature(&Image::constant(8, 8, [1.0, 1.0, 1.0]));
        assert_eq!(cosine(&black, &white), 0.0);
        assert!(!black.is_blank());

        let empty = image_feature(&Image {
            width: 0,
            height: 0,
            pixels: vec![],
        });
        assert!(empty.is_blank());
        assert_eq!(cosine(&empty, &white), 0.0);
    }

    #[test]
    fn similarity_never_picks_a_duplicate_of_training_data() {
        let mut fx = Fixture::new();
        // Make view 0's ground-truth image the (sole) training image: its
        // similarity is exactly 1 and it can never win its section argmin.
        let pose0 = fx.views.view(0).unwrap().pose.clone();
        fx.training_images =
            vec![render_ground_truth(&fx.scene, &fx.cam, &pose0, [1.0, 1.0, 1.0], 2).unwrap()];
        let sel = policy_similarity(&fx.state(), true).unwrap();
        let row0 = sel
            .scores
            .iter()
            .find(|r| r.view_id == 0)
            .expect("view 0 scored");
        assert!((row0.score - 1.0).abs() < 1e-12);
        assert!(!sel.chosen.contains(&0));

        // Synthesized mode works without a scene handle.
        let mut state = fx.state();
        state.scene = None;
        assert!(policy_similarity(&state, true).is_err());
        assert!(policy_similarity(&state, false).is_ok());
    }

    #[test]
    fn topk_orders_by_score_then_id() {
        let scores: BTreeMap<u32, f64> =
            [(1, 0.2), (2, 0.8), (3, 0.8), (4, 0.5)].into_iter().collect();
        assert_eq!(top_k_by_score(&scores, 1), vec![2]);
        assert_eq!(top_k_by_score(&scores, 3), vec![2, 3, 4]);

        let fx = Fixture::new();
        assert!(policy_topk_entropy(&fx.state(), 999).is_err());
        let sel = policy_topk_entropy(&fx.state(), 3).unwrap();
        // Flat zero scores: lowest candidate ids win.
        assert_eq!(sel.chosen, vec![0, 1, 2]);
    }

    #[test]
    fn entropy_distance_reduces_to_topk_at_lambda_zero() {
        let fx = Fixture::new();
        let topk = policy_topk_entropy(&fx.state(), 5).unwrap();
        let dist = policy_entropy_distance(&fx.state(), 5, 0.0).unwrap();
        assert_eq!(topk.chosen, dist.chosen);

        // k = 1 is the global argmax regardless of lambda.
        let one = policy_entropy_distance(&fx.state(), 1, 3.0).unwrap();
        assert_eq!(one.chosen, topk.chosen[..1].to_vec());
    }

    #[test]
    fn entropy_distance_prefers_far_candidates_on_ties() {
        // Candidate 10 sits exactly at the first pick's position, candidate
        // 20 far away; equal entropy means the distant one wins.
        let norm_scores: BTreeMap<u32, f64> =
            [(1, 1.0), (10, 0.5), (20, 0.5)].into_iter().collect();
        let positions: BTreeMap<u32, Vector3<f64>> = [
            (1, Vector3::new(2.0, 0.0, 0.5)),
            (10, Vector3::new(2.0, 0.0, 0.5)),
            (20, Vector3::new(-2.0, 0.0, 0.5)),
        ]
        .into_iter()
        .collect();
        let chosen =
            greedy_entropy_distance(&norm_scores, &positions, Vector3::zeros(), 2, 0.5).unwrap();
        assert_eq!(chosen, vec![1, 20]);
    }

    #[test]
    fn dispatch_respects_contracts() {
        let fx = Fixture::new();
        let opts = PolicyOptions { k: 6, lambda: 0.5 };
        for policy in Policy::ALL {
            let sel = select_next_views(policy, &fx.state(), &opts).unwrap();
            assert_eq!(sel.policy, policy.name());
            assert_eq!(sel.chosen.len(), 6, "{}", policy.name());
            let unique: BTreeSet<u32> = sel.chosen.iter().copied().collect();
            assert_eq!(unique.len(), 6, "{} returned duplicates", policy.name());
            for id in &sel.chosen {
                assert!(fx.candidates.contains(id));
                assert!(!fx.training.contains(id));
            }
            // Per-section policies never touch the middle circle.
            if matches!(
                policy,
                Policy::RegionEntropy
                    | Policy::RandomSection
                    | Policy::Heuristic
                    | Policy::Similarity
                    | Policy::SimilarityGt
            ) {
                for id in &sel.chosen {
                    assert!(!fx.clustering.excluded.contains(id));
                }
            }
            let again = select_next_views(policy, &fx.state(), &opts).unwrap();
            assert_eq!(sel.chosen, again.chosen, "{} not deterministic", policy.name());
        }
        assert!(Policy::parse("telepathy").is_err());
        assert_eq!(Policy::parse("region-entropy").unwrap(), Policy::RegionEntropy);
    }
}

//! The active reconstruction loop: acquire initial views, train, score
//! candidates, select with a policy, acquire, refine, and evaluate against
//! ground-truth geometry. All randomness derives from one master seed
//! through labeled sub-seeds.

use crate::entropy::{BackgroundMode, EntropyOptions, MeanMode};
use crate::error::{Error, Result};
use crate::field::{
    density_grid_export, train, Aabb, RadianceField, TrainConfig, TrainReport,
};
use crate::geometry::{
    cluster_regions, default_elevations, generate_view_space, CameraIntrinsics, RegionClustering,
    ViewSpace,
};
use crate::io;
use crate::mesh::{fscore, marching_cubes, sample_mesh_points, PointCloud};
use crate::policy::{
    candidate_entropy_scores, select_next_views, Policy, PolicyOptions, PolicyState, Selection,
};
use crate::scene::{render_ground_truth, scene_preset, Image, SdfScene};
use crate::sub_seed;
use nalgebra::Vector3;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSpaceConfig {
    pub n_circles: u32,
    pub poses_per_circle: u32,
    /// Empty means evenly spaced defaults.
    pub elevations_deg: Vec<f64>,
    pub radius: f64,
    pub target: Vector3<f64>,
    pub azimuth_bins: u32,
}

impl Default for ViewSpaceConfig {
    fn default() -> Self {
        ViewSpaceConfig {
            n_circles: 5,
            poses_per_circle: 30,
            // A low middle circle leaves the top cap under-observed by the
            // initial views, so selecting top views carries real information.
            elevations_deg: vec![12.0, 24.0, 36.0, 48.0, 66.0],
            radius: 2.0,
            target: Vector3::zeros(),
            azimuth_bins: 6,
        }
    }
}

impl ViewSpaceConfig {
    pub fn build(&self) -> Result<ViewSpace> {
        let elevations: Vec<f64> = if self.elevations_deg.is_empty() {
            default_elevations(self.n_circles)
        } else {
            self.elevations_deg.iter().map(|d| d.to_radians()).collect()
        };
        generate_view_space(
            self.n_circles,
            self.poses_per_circle,
            &elevations,
            self.radius,
            self.target,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scene: String,
    pub cam: CameraIntrinsics,
    pub view_space: ViewSpaceConfig,
    pub initial_views: u32,
    pub policy: Policy,
    /// 0 selects one view per section.
    pub policy_k: usize,
    pub policy_lambda: f64,
    pub iterations: u32,
    pub init_train: TrainConfig,
    pub refine_train: TrainConfig,
    pub entropy: EntropyOptions,
    pub entropy_downsample: u32,
    pub field_resolution: usize,
    pub field_side: f64,
    pub mesh_resolution: usize,
    pub mesh_side: f64,
    pub mesh_iso: f64,
    pub fscore_threshold: f64,
    pub fscore_points: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: "sphere".to_string(),
            cam: CameraIntrinsics {
                width: 100,
                height: 100,
                vfov: 60.0_f64.to_radians(),
            },
            view_space: ViewSpaceConfig::default(),
            initial_views: 6,
            policy: Policy::RegionEntropy,
            policy_k: 0,
            policy_lambda: 0.5,
            iterations: 1,
            init_train: TrainConfig::default(),
            refine_train: TrainConfig::default(),
            entropy: EntropyOptions::default(),
            entropy_downsample: 4,
            field_resolution: 32,
            field_side: 2.4,
            mesh_resolution: 128,
            mesh_side: 2.4,
            mesh_iso: 2.0,
            fscore_threshold: 0.02,
            fscore_points: 100_000,
            seed: 0,
            out_dir: None,
            verbose: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_views == 0 || self.initial_views > self.view_space.poses_per_circle {
            return Err(Error::invalid(
                "initial view count must be in 1..=poses_per_circle",
            ));
        }
        self.init_train.validate()?;
        self.refine_train.validate()?;
        self.entropy.validate()?;
        if self.entropy_downsample == 0
            || self.cam.width % self.entropy_downsample != 0
            || self.cam.height % self.entropy_downsample != 0
        {
            return Err(Error::invalid(
                "entropy downsample must divide the camera dimensions",
            ));
        }
        if self.field_resolution < 2 {
            return Err(Error::invalid("field resolution must be >= 2"));
        }
        if self.mesh_resolution < 8 {
            return Err(Error::invalid("mesh resolution must be >= 8"));
        }
        if !(self.fscore_threshold > 0.0) {
            return Err(Error::invalid("f-score threshold must be positive"));
        }
        if self.fscore_points == 0 {
            return Err(Error::invalid("f-score point count must be >= 1"));
        }
        Ok(())
    }

    /// Flat key=value dump; the same schema `apply_key_value` accepts.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let bg_mode = match self.entropy.background {
            BackgroundMode::ZeroEntropy => "zero-entropy",
            BackgroundMode::MaxEntropy => "max-entropy",
            BackgroundMode::Exclude => "exclude",
        };
        let mean_mode = match self.entropy.mean {
            MeanMode::AllPixels => "all-pixels",
            MeanMode::OpacityMasked => "opacity-masked",
        };
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        push("scene", self.scene.clone());
        push("policy", self.policy.name().to_string());
        push("policy.k", self.policy_k.to_string());
        push("policy.lambda", format!("{}", self.policy_lambda));
        push("iterations", self.iterations.to_string());
        push("seed", self.seed.to_string());
        push("initial_views", self.initial_views.to_string());
        push("camera.width", self.cam.width.to_string());
        push("camera.height", self.cam.height.to_string());
        push("camera.vfov_deg", format!("{}", self.cam.vfov.to_degrees()));
        push("viewspace.circles", self.view_space.n_circles.to_string());
        push(
            "viewspace.per_circle",
            self.view_space.poses_per_circle.to_string(),
        );
        push(
            "viewspace.elevations_deg",
            join(&self.view_space.elevations_deg),
        );
        push("viewspace.radius", format!("{}", self.view_space.radius));
        push(
            "viewspace.target",
            format!(
                "{},{},{}",
                self.view_space.target.x, self.view_space.target.y, self.view_space.target.z
            ),
        );
        push(
            "viewspace.azimuth_bins",
            self.view_space.azimuth_bins.to_string(),
        );
        push("field.resolution", self.field_resolution.to_string());
        push("field.side", format!("{}", self.field_side));
        push("train.steps", self.init_train.steps.to_string());
        push(
            "train.rays_per_batch",
            self.init_train.rays_per_batch.to_string(),
        );
        push(
            "train.learning_rate",
            format!("{}", self.init_train.learning_rate),
        );
        push("train.n_samples", self.init_train.n_samples.to_string());
        push("train.t_near", format!("{}", self.init_train.t_near));
        push("train.t_far", format!("{}", self.init_train.t_far));
        push("train.background", join(&self.init_train.background));
        push("train.stratified", self.init_train.stratified.to_string());
        push("refine.steps", self.refine_train.steps.to_string());
        push(
            "entropy.downsample",
            self.entropy_downsample.to_string(),
        );
        push("entropy.tau_bg", format!("{}", self.entropy.tau_bg));
        push("entropy.epsilon", format!("{}", self.entropy.epsilon));
        push("entropy.background", bg_mode.to_string());
        push("entropy.mean", mean_mode.to_string());
        push("mesh.resolution", self.mesh_resolution.to_string());
        push("mesh.side", format!("{}", self.mesh_side));
        push("mesh.iso", format!("{}", self.mesh_iso));
        push("fscore.threshold", format!("{}", self.fscore_threshold));
        push("fscore.points", self.fscore_points.to_string());
        kv
    }

    /// Applies one `key=value` setting.
    pub fn apply_key_value(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse()
                .map_err(|e| Error::Format(format!("config key '{key}': {e}")))
        }
        fn floats(key: &str, v: &str) -> Result<Vec<f64>> {
            if v.trim().is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|s| num::<f64>(key, s.trim())).collect()
        }
        match key {
            "scene" => self.scene = value.to_string(),
            "policy" => self.policy = Policy::parse(value)?,
            "policy.k" => self.policy_k = num(key, value)?,
            "policy.lambda" => self.policy_lambda = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "initial_views" => self.initial_views = num(key, value)?,
            "camera.width" => self.cam.width = num(key, value)?,
            "camera.height" => self.cam.height = num(key, value)?,
            "camera.vfov_deg" => self.cam.vfov = num::<f64>(key, value)?.to_radians(),
            "viewspace.circles" => self.view_space.n_circles = num(key, value)?,
            "viewspace.per_circle" => self.view_space.poses_per_circle = num(key, value)?,
            "viewspace.elevations_deg" => self.view_space.elevations_deg = floats(key, value)?,
            "viewspace.radius" => self.view_space.radius = num(key, value)?,
            "viewspace.target" => {
                let v = floats(key, value)?;
                if v.len() != 3 {
                    return Err(Error::Format("viewspace.target needs 3 values".into()));
                }
                self.view_space.target = Vector3::new(v[0], v[1], v[2]);
            }
            "viewspace.azimuth_bins" => self.view_space.azimuth_bins = num(key, value)?,
            "field.resolution" => self.field_resolution = num(key, value)?,
            "field.side" => self.field_side = num(key, value)?,
            "train.steps" => {
                self.init_train.steps = num(key, value)?;
            }
            "train.rays_per_batch" => {
                self.init_train.rays_per_batch = num(key, value)?;
                self.refine_train.rays_per_batch = self.init_train.rays_per_batch;
            }
            "train.learning_rate" => {
                self.init_train.learning_rate = num(key, value)?;
                self.refine_train.learning_rate = self.init_train.learning_rate;
            }
            "train.n_samples" => {
                self.init_train.n_samples = num(key, value)?;
                self.refine_train.n_samples = self.init_train.n_samples;
            }
            "train.t_near" => {
                self.init_train.t_near = num(key, value)?;
                self.refine_train.t_near = self.init_train.t_near;
            }
            "train.t_far" => {
                self.init_train.t_far = num(key, value)?;
                self.refine_train.t_far = self.init_train.t_far;
            }
            "train.background" => {
                let v = floats(key, value)?;
                if v.len() != 3 {
                    return Err(Error::Format("train.background needs 3 values".into()));
                }
                self.init_train.background = [v[0], v[1], v[2]];
                self.refine_train.background = self.init_train.background;
            }
            "train.stratified" => {
                self.init_train.stratified = num(key, value)?;
                self.refine_train.stratified = self.init_train.stratified;
            }
            "refine.steps" => self.refine_train.steps = num(key, value)?,
            "entropy.downsample" => self.entropy_downsample = num(key, value)?,
            "entropy.tau_bg" => self.entropy.tau_bg = num(key, value)?,
            "entropy.epsilon" => self.entropy.epsilon = num(key, value)?,
            "entropy.background" => {
                self.entropy.background = match value {
                    "zero-entropy" => BackgroundMode::ZeroEntropy,
                    "max-entropy" => BackgroundMode::MaxEntropy,
                    "exclude" => BackgroundMode::Exclude,
                    other => {
                        return Err(Error::Format(format!(
                            "unknown entropy background mode '{other}'"
                        )))
                    }
                }
            }
            "entropy.mean" => {
                self.entropy.mean = match value {
                    "all-pixels" => MeanMode::AllPixels,
                    "opacity-masked" => MeanMode::OpacityMasked,
                    other => {
                        return Err(Error::Format(format!("unknown mean mode '{other}'")))
                    }
                }
            }
            "mesh.resolution" => self.mesh_resolution = num(key, value)?,
            "mesh.side" => self.mesh_side = num(key, value)?,
            "mesh.iso" => self.mesh_iso = num(key, value)?,
            "fscore.threshold" => self.fscore_threshold = num(key, value)?,
            "fscore.points" => self.fscore_points = num(key, value)?,
            other => {
                return Err(Error::Format(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn parse_config_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("config line {}: expected key=value", lineno + 1))
            })?;
            self.apply_key_value(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn config_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_key_values() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub iteration: u32,
    pub n_images: usize,
    pub policy: String,
    pub selected: Vec<u32>,
    /// Mean over remaining candidates of their view mean entropy.
    pub mean_entropy: f64,
    /// Final logged training PSNR of the phase that produced this row.
    pub psnr: f64,
    pub fscore: f64,
    /// Wall time of the phase; reported in timings.txt, not in report.csv.
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<IterationRow>,
    pub warning: Option<String>,
    pub final_mesh: Option<PathBuf>,
}

/// report.csv with the fixed column set. The `seconds` column is written as
/// `0.000` so reports are byte-reproducible; wall-clock timings go to
/// timings.txt instead.
pub fn report_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("iter,n_images,policy,selected_ids,mean_entropy,psnr,fscore,seconds\n");
    for row in &report.rows {
        let ids = row
            .selected
            .iter()
            .map(|id| id.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},0.000",
            row.iteration, row.n_images, row.policy, ids, row.mean_entropy, row.psnr, row.fscore
        );
    }
    out
}

fn timings_text(report: &ExperimentReport) -> String {
    let mut out = String::from("iter seconds\n");
    for row in &report.rows {
        let _ = writeln!(out, "{} {:.3}", row.iteration, row.seconds);
    }
    out
}

struct Evaluator {
    gt_points: PointCloud,
}

impl Evaluator {
    fn fscore_of(
        &self,
        cfg: &ExperimentConfig,
        field: &RadianceField,
        mesh_path: Option<&Path>,
        sample_seed: u64,
    ) -> Result<f64> {
        let grid = density_grid_export(
            field,
            cfg.mesh_resolution,
            cfg.mesh_side,
            cfg.view_space.target,
        )?;
        let mesh = marching_cubes(&grid, cfg.mesh_iso)?;
        if let Some(path) = mesh_path {
            io::write_ply(path, &mesh)?;
        }
        let pred = if mesh.is_empty() {
            PointCloud::default()
        } else {
            sample_mesh_points(&mesh, cfg.fscore_points, sample_seed)?
        };
        Ok(fscore(&pred, &self.gt_points, cfg.fscore_threshold)?.fscore)
    }
}

fn initial_view_ids(vs: &ViewSpace, count: u32) -> Vec<u32> {
    let middle = vs.middle_circle_ids();
    (0..count)
        .map(|i| middle[(i as usize * middle.len()) / count as usize])
        .collect()
}

struct LoopState<'a> {
    cfg: &'a ExperimentConfig,
    scene: SdfScene,
    views: ViewSpace,
    clustering: RegionClustering,
    field: RadianceField,
    training_ids: BTreeSet<u32>,
    candidate_ids: BTreeSet<u32>,
    images_full: Vec<(u32, Image)>,
    images_ds: Vec<Image>,
}

impl LoopState<'_> {
    fn acquire(&mut self, ids: &[u32]) -> Result<()> {
        for &id in ids {
            let pose = self
                .views
                .view(id)
                .ok_or_else(|| Error::invalid(format!("unknown view id {id}")))?
                .pose
                .clone();
            let full = render_ground_truth(
                &self.scene,
                &self.cfg.cam,
                &pose,
                self.cfg.init_train.background,
                1,
            )?;
            let ds = render_ground_truth(
                &self.scene,
                &self.cfg.cam,
                &pose,
                self.cfg.init_train.background,
                self.cfg.entropy_downsample,
            )?;
            self.images_full.push((id, full));
            self.images_ds.push(ds);
            self.training_ids.insert(id);
            self.candidate_ids.remove(&id);
        }
        Ok(())
    }

    fn train_images(&self) -> Vec<(crate::geometry::Pose, Image)> {
        self.images_full
            .iter()
            .map(|(id, img)| (self.views.view(*id).unwrap().pose.clone(), img.clone()))
            .collect()
    }

    fn policy_state<'b>(&'b self, render_cfg: &'b TrainConfig, seed: u64) -> PolicyState<'b> {
        PolicyState {
            field: &self.field,
            views: &self.views,
            clustering: &self.clustering,
            training_ids: &self.training_ids,
            candidate_ids: &self.candidate_ids,
            seed,
            scene: Some(&self.scene),
            cam: &self.cfg.cam,
            render_cfg,
            entropy_opts: &self.cfg.entropy,
            downsample: self.cfg.entropy_downsample,
            training_images: &self.images_ds,
        }
    }

    /// Mean over all remaining candidates of their per-view mean entropy.
    fn candidate_mean_entropy(&self, render_cfg: &TrainConfig) -> Result<f64> {
        if self.candidate_ids.is_empty() {
            return Ok(0.0);
        }
        let ids: Vec<u32> = self.candidate_ids.iter().copied().collect();
        let state = self.policy_state(render_cfg, 0);
        let scores = candidate_entropy_scores(&state, &ids)?;
        Ok(scores.values().sum::<f64>() / scores.len() as f64)
    }
}

fn selection_feasible(state: &LoopState, policy: Policy, k: usize) -> Option<String> {
    match policy {
        Policy::PureRandom | Policy::TopkEntropy | Policy::EntropyDistance => {
            if k > state.candidate_ids.len() {
                return Some(format!(
                    "candidate pool exhausted: need {k}, have {}",
                    state.candidate_ids.len()
                ));
            }
        }
        _ => {
            for (section, members) in &state.clustering.sections {
                if !members.iter().any(|id| state.candidate_ids.contains(id)) {
                    return Some(format!("section {section} has no remaining candidates"));
                }
            }
        }
    }
    None
}

fn write_scores_csv(path: &Path, selection: &Selection) -> Result<()> {
    let mut out = String::from("view_id,section,score\n");
    for row in &selection.scores {
        let section = row
            .section
            .map(|s| s.to_string())
            .unwrap_or_default();
        let _ = writeln!(out, "{},{},{:.6}", row.view_id, section, row.score);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One train-evaluate-record phase: trains on everything acquired so far,
/// snapshots the field, and appends a report row.
fn run_phase(
    cfg: &ExperimentConfig,
    evaluator: &Evaluator,
    state: &mut LoopState,
    iteration: u32,
    selected: Vec<u32>,
    train_cfg: &TrainConfig,
    report: &mut ExperimentReport,
) -> Result<()> {
    let phase_start = Instant::now();
    let mut train_cfg = train_cfg.clone();
    train_cfg.seed = sub_seed(cfg.seed, "train", iteration as u64);
    let images = state.train_images();
    let train_report: TrainReport = train(&mut state.field, &cfg.cam, &images, &train_cfg)?;
    // The checkpoint is the canonical state between phases; keep the
    // in-memory field identical to what a reload would produce.
    io::quantize_to_checkpoint_precision(&mut state.field);
    if let Some(dir) = &cfg.out_dir {
        io::save_checkpoint(&dir.join(format!("ckpt_{iteration:03}.bin")), &state.field)?;
    }
    let mean_entropy = state.candidate_mean_entropy(&train_cfg)?;
    let mesh_path = cfg
        .out_dir
        .as_ref()
        .map(|d| d.join(format!("mesh_{iteration:03}.ply")));
    let f = evaluator.fscore_of(
        cfg,
        &state.field,
        mesh_path.as_deref(),
        sub_seed(cfg.seed, "mesh-points", iteration as u64),
    )?;
    if let Some(path) = mesh_path {
        report.final_mesh = Some(path);
    }
    let row = IterationRow {
        iteration,
        n_images: state.images_full.len(),
        policy: cfg.policy.name().to_string(),
        selected,
        mean_entropy,
        psnr: train_report.final_psnr(),
        fscore: f,
        seconds: phase_start.elapsed().as_secs_f64(),
    };
    if cfg.verbose {
        eprintln!(
            "[{}] iter {} images {} mean_entropy {:.4} psnr {:.2} fscore {:.4} ({:.1}s)",
            cfg.scene,
            row.iteration,
            row.n_images,
            row.mean_entropy,
            row.psnr,
            row.fscore,
            row.seconds
        );
    }
    report.rows.push(row);
    Ok(())
}

/// Runs the full loop of acquire, train, score, select, refine and evaluate.
pub fn run_active_loop(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let scene = scene_preset(&cfg.scene)?;
    let views = cfg.view_space.build()?;
    let clustering = cluster_regions(&views, cfg.view_space.azimuth_bins)?;
    let n_sections = clustering.n_sections();
    let policy_k = if cfg.policy_k == 0 {
        n_sections
    } else {
        cfg.policy_k
    };

    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), cfg.config_text())?;
        io::write_view_space(&dir.join("views.txt"), &views)?;
    }

    let evaluator = Evaluator {
        gt_points: crate::scene::sample_surface_points(
            &scene,
            cfg.fscore_points,
            sub_seed(cfg.seed, "gt-points", 0),
        )?,
    };

    let field = RadianceField::new(
        Aabb::cube(cfg.view_space.target, cfg.field_side),
        [cfg.field_resolution; 3],
    )?;
    let mut state = LoopState {
        cfg,
        scene,
        views,
        clustering,
        field,
        training_ids: BTreeSet::new(),
        candidate_ids: BTreeSet::new(),
        images_full: Vec::new(),
        images_ds: Vec::new(),
    };
    state.candidate_ids = state.views.views.iter().map(|v| v.id).collect();

    // Initialization: evenly spaced middle-circle views, trained from scratch.
    let init_ids = initial_view_ids(&state.views, cfg.initial_views);
    state.acquire(&init_ids)?;

    let mut report = ExperimentReport {
        rows: Vec::new(),
        warning: None,
        final_mesh: None,
    };

    run_phase(
        cfg,
        &evaluator,
        &mut state,
        0,
        init_ids.clone(),
        &cfg.init_train,
        &mut report,
    )?;

    for iteration in 1..=cfg.iterations {
        if let Some(reason) = selection_feasible(&state, cfg.policy, policy_k) {
            report.warning = Some(format!("truncated at iteration {iteration}: {reason}"));
            if cfg.verbose {
                eprintln!("warning: {}", report.warning.as_ref().unwrap());
            }
            break;
        }
        let policy_seed = sub_seed(cfg.seed, "policy", iteration as u64);
        let render_cfg = cfg.refine_train.clone();
        let selection = {
            let pstate = state.policy_state(&render_cfg, policy_seed);
            select_next_views(
                cfg.policy,
                &pstate,
                &PolicyOptions {
                    k: policy_k,
                    lambda: cfg.policy_lambda,
                },
            )?
        };
        if let Some(dir) = &cfg.out_dir {
            write_scores_csv(
                &dir.join(format!("scores_{iteration:03}.csv")),
                &selection,
            )?;
            for &id in &selection.chosen {
                let view = state.views.view(id).unwrap();
                let map = crate::entropy::entropy_map(
                    &state.field,
                    &cfg.cam,
                    &view.pose,
                    &render_cfg,
                    cfg.entropy_downsample,
                    &cfg.entropy,
                )?;
                io::write_entropy_pgm(
                    &dir.join(format!("entropy_{iteration:03}_{id}.pgm")),
                    &map,
                    render_cfg.n_samples,
                )?;
            }
        }
        state.acquire(&selection.chosen)?;
        run_phase(
            cfg,
            &evaluator,
            &mut state,
            iteration,
            selection.chosen,
            &cfg.refine_train,
            &mut report,
        )?;
    }

    if let Some(dir) = &cfg.out_dir {
        std::fs::write(dir.join("report.csv"), report_csv(&report))?;
        std::fs::write(dir.join("timings.txt"), timings_text(&report))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = ExperimentConfig::default();
        cfg.scene = "loader".into();
        cfg.policy = Policy::TopkEntropy;
        cfg.policy_k = 4;
        cfg.iterations = 3;
        cfg.seed = 99;
        cfg.init_train.steps = 123;
        cfg.refine_train.steps = 77;
        cfg.entropy.mean = MeanMode::OpacityMasked;
        cfg.view_space.elevations_deg = vec![20.0, 45.0, 70.0];
        cfg.view_space.n_circles = 3;

        let text = cfg.config_text();
        let mut back = ExperimentConfig::default();
        back.parse_config_text(&text).unwrap();
        assert_eq!(back.scene, "loader");
        assert_eq!(back.policy, Policy::TopkEntropy);
        assert_eq!(back.policy_k, 4);
        assert_eq!(back.iterations, 3);
        assert_eq!(back.seed, 99);
        assert_eq!(back.init_train.steps, 123);
        assert_eq!(back.refine_train.steps, 77);
        assert_eq!(back.entropy.mean, MeanMode::OpacityMasked);
        assert_eq!(back.view_space.elevations_deg, vec![20.0, 45.0, 70.0]);

        let mut bad = ExperimentConfig::default();
        assert!(bad.parse_config_text("nonsense=1").is_err());
        assert!(bad.parse_config_text("no equals sign").is_err());
    }

    #[test]
    fn initial_ids_are_evenly_spaced_on_the_middle_circle() {
        let vs = ViewSpaceConfig::default().build().unwrap();
        let ids = initial_view_ids(&vs, 6);
        assert_eq!(ids, vec![60, 65, 70, 75, 80, 85]);
        for id in ids {
            assert_eq!(vs.view(id).unwrap().circle_index, vs.middle_circle);
        }
        let two = initial_view_ids(&vs, 2);
        assert_eq!(two, vec![60, 75]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.initial_views = 31;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.entropy_downsample = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.fscore_threshold = 0.0;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    /// A miniature configuration for fast loop tests.
    pub fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.scene = "sphere".into();
        cfg.cam = CameraIntrinsics {
            width: 32,
            height: 32,
            vfov: 1.0,
        };
        cfg.view_space = ViewSpaceConfig {
            n_circles: 3,
            poses_per_circle: 6,
            elevations_deg: vec![20.0, 45.0, 70.0],
            radius: 2.0,
            target: Vector3::zeros(),
            azimuth_bins: 3,
        };
        cfg.initial_views = 3;
        cfg.iterations = 1;
        cfg.init_train = TrainConfig {
            steps: 60,
            rays_per_batch: 128,
            n_samples: 32,
            log_every: 20,
            ..TrainConfig::default()
        };
        cfg.refine_train = cfg.init_train.clone();
        cfg.entropy_downsample = 2;
        cfg.field_resolution = 12;
        cfg.mesh_resolution = 32;
        cfg.fscore_points = 2_000;
        cfg.verbose = false;
        cfg
    }

    #[test]
    fn zero_iterations_gives_a_single_row() {
        let mut cfg = tiny_config();
        cfg.iterations = 0;
        let report = run_active_loop(&cfg).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].iteration, 0);
        assert_eq!(report.rows[0].n_images, 3);
        assert_eq!(report.rows[0].selected, vec![6, 8, 10]);
        assert!(report.warning.is_none());
    }

    #[test]
    fn one_iteration_bookkeeping() {
        let cfg = tiny_config();
        let report = run_active_loop(&cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        // 3 initial + one per section (6 sections).
        assert_eq!(report.rows[1].n_images, 3 + 6);
        assert_eq!(report.rows[1].selected.len(), 6);
        for row in &report.rows {
            let expected = 3 + report.rows[1..=row.iteration as usize]
                .iter()
                .map(|r| r.selected.len())
                .sum::<usize>();
            assert_eq!(row.n_images, expected);
        }
    }

    #[test]
    fn loop_truncates_when_the_pool_runs_out() {
        let mut cfg = tiny_config();
        // 12 section candidates; 2 per section; after 2 iterations the
        // sections are empty.
        cfg.iterations = 5;
        cfg.init_train.steps = 10;
        cfg.refine_train.steps = 10;
        let report = run_active_loop(&cfg).unwrap();
        assert!(report.rows.len() <= 4);
        assert!(report.warning.is_some(), "expected a truncation warning");
    }

    #[test]
    fn report_csv_format() {
        let report = ExperimentReport {
            rows: vec![IterationRow {
                iteration: 0,
                n_images: 6,
                policy: "region-entropy".into(),
                selected: vec![60, 65],
                mean_entropy: 1.75,
                psnr: 27.5,
                fscore: 0.41,
                seconds: 12.34,
            }],
            warning: None,
            final_mesh: None,
        };
        let csv = report_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,n_images,policy,selected_ids,mean_entropy,psnr,fscore,seconds"
        );
        assert_eq!(
            lines.next().unwrap(),
            "0,6,region-entropy,60;65,1.750000,27.500000,0.410000,0.000"
        );
    }
}

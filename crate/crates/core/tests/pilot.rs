//! Scratch calibration runs; not part of the regular suite.

use nbv_core::entropy::{entropy_map, view_mean_entropy, EntropyOptions};
use nbv_core::experiment::{run_active_loop, ExperimentConfig};
use nbv_core::field::{density_grid_export, train, Aabb, RadianceField, TrainConfig};
use nbv_core::geometry::CameraIntrinsics;
use nbv_core::mesh::{fscore, marching_cubes, sample_mesh_points};
use nbv_core::policy::Policy;
use nbv_core::scene::{render_ground_truth, sample_surface_points, scene_preset};
use std::time::Instant;

fn base_cfg(scene: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scene = scene.to_string();
    cfg.verbose = true;
    cfg
}

#[test]
#[ignore]
fn pilot_training_speed_and_psnr() {
    for lr in [0.05, 0.08, 0.12] {
        let scene = scene_preset("sphere").unwrap();
        let cfg = base_cfg("sphere");
        let vs = cfg.view_space.build().unwrap();
        let cam = cfg.cam;
        let ids = [60u32, 65, 70, 75, 80, 85];
        let images: Vec<_> = ids
            .iter()
            .map(|&id| {
                let pose = vs.view(id).unwrap().pose.clone();
                let img = render_ground_truth(&scene, &cam, &pose, [1.0, 1.0, 1.0], 1).unwrap();
                (pose, img)
            })
            .collect();
        let mut field = RadianceField::new(
            Aabb::cube(nalgebra::Vector3::zeros(), 2.4),
            [32, 32, 32],
        )
        .unwrap();
        let tc = TrainConfig {
            steps: 3000,
            learning_rate: lr,
            seed: 1,
            ..TrainConfig::default()
        };
        let start = Instant::now();
        let report = train(&mut field, &cam, &images, &tc).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let max_sigma = density_grid_export(&field, 64, 2.4, nalgebra::Vector3::zeros())
            .unwrap()
            .values
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        println!(
            "lr {lr}: {} steps in {:.1}s ({:.2} ms/step), final psnr {:.2}, max sigma {:.1}",
            tc.steps,
            secs,
            1000.0 * secs / tc.steps as f64,
            report.final_psnr(),
            max_sigma
        );
        // Entropy of trained field: per-iso mesh F-scores.
        let gt = sample_surface_points(&scene, 100_000, 42).unwrap();
        for iso in [1.0, 2.0, 5.0, 10.0, 20.0] {
            let grid = density_grid_export(&field, 128, 2.4, nalgebra::Vector3::zeros()).unwrap();
            let mesh = marching_cubes(&grid, iso).unwrap();
            if mesh.is_empty() {
                println!("  iso {iso}: empty mesh");
                continue;
            }
            let pred = sample_mesh_points(&mesh, 100_000, 7).unwrap();
            let line: Vec<String> = [0.005, 0.01, 0.02, 0.03, 0.05]
                .iter()
                .map(|&d| format!("F(d={d})={:.4}", fscore(&pred, &gt, d).unwrap().fscore))
                .collect();
            println!("  iso {iso}: {}", line.join(" "));
        }
    }
}

#[test]
#[ignore]
fn pilot_entropy_direction_snowman() {
    use nbv_core::entropy::MeanMode;
    use nbv_core::scene::{Primitive, SdfScene, Shape};
    let tall_snowman = SdfScene::new(
        vec![
            Primitive::axis_aligned(
                Shape::Box {
                    half_extents: nalgebra::Vector3::new(0.5, 0.5, 0.35),
                },
                nalgebra::Vector3::new(0.0, 0.0, -0.30),
                [0.25, 0.35, 0.75],
            ),
            Primitive::axis_aligned(
                Shape::Sphere { radius: 0.42 },
                nalgebra::Vector3::new(0.0, 0.0, 0.45),
                [0.85, 0.82, 0.78],
            ),
        ],
        1.2,
    )
    .unwrap();

    for (scene_name, scene) in [
        ("snowman", scene_preset("snowman").unwrap()),
        ("tall", tall_snowman),
    ] {
        for (elev_name, elevations) in [
            ("default", vec![]),
            ("low", vec![12.0, 24.0, 36.0, 48.0, 66.0]),
        ] {
            let mut cfg = base_cfg("snowman");
            cfg.view_space.elevations_deg = elevations;
            let vs = cfg.view_space.build().unwrap();
            let cam = cfg.cam;
            let ids = [60u32, 65, 70, 75, 80, 85];
            let images: Vec<_> = ids
                .iter()
                .map(|&id| {
                    let pose = vs.view(id).unwrap().pose.clone();
                    let img =
                        render_ground_truth(&scene, &cam, &pose, [1.0, 1.0, 1.0], 1).unwrap();
                    (pose, img)
                })
                .collect();
            let mut field =
                RadianceField::new(Aabb::cube(nalgebra::Vector3::zeros(), 2.4), [32, 32, 32])
                    .unwrap();
            let tc = TrainConfig {
                steps: 3000,
                seed: 5,
                ..TrainConfig::default()
            };
            train(&mut field, &cam, &images, &tc).unwrap();
            for (mode_name, mean) in [
                ("all", MeanMode::AllPixels),
                ("masked", MeanMode::OpacityMasked),
            ] {
                let opts = EntropyOptions {
                    mean,
                    ..EntropyOptions::default()
                };
                let mean_of = |circle: u32, exclude: &[u32]| {
                    let views: Vec<_> = vs
                        .views
                        .iter()
                        .filter(|v| v.circle_index == circle && !exclude.contains(&v.id))
                        .collect();
                    let mut total = 0.0;
                    for v in &views {
                        let map = entropy_map(&field, &cam, &v.pose, &tc, 4, &opts).unwrap();
                        total += view_mean_entropy(&map, &opts).unwrap();
                    }
                    total / views.len() as f64
                };
                let per_circle: Vec<String> = (0..5)
                    .map(|c| format!("{:.4}", mean_of(c, &ids)))
                    .collect();
                println!(
                    "{scene_name}/{elev_name}/{mode_name}: circles [{}]",
                    per_circle.join(", ")
                );
            }
        }
    }
}

#[test]
#[ignore]
fn pilot_policy_comparison() {
    use rayon::prelude::*;
    let policies = [
        Policy::RegionEntropy,
        Policy::PureRandom,
        Policy::RandomSection,
    ];
    let mut jobs = Vec::new();
    for scene in ["sphere", "snowman", "loader", "ficus"] {
        for seed in [0u64, 1] {
            for policy in policies {
                jobs.push((scene, seed, policy));
            }
        }
    }
    let lines: Vec<String> = jobs
        .par_iter()
        .map(|&(scene, seed, policy)| {
            let mut cfg = base_cfg(scene);
            cfg.verbose = false;
            cfg.policy = policy;
            cfg.seed = seed;
            cfg.iterations = 1;
            let report = run_active_loop(&cfg).unwrap();
            format!(
                "{scene} seed {seed} {}: init F {:.4} -> iter1 F {:.4} (entropy {:.4} -> {:.4}) ids {:?}",
                policy.name(),
                report.rows[0].fscore,
                report.rows[1].fscore,
                report.rows[0].mean_entropy,
                report.rows[1].mean_entropy,
                report.rows[1].selected,
            )
        })
        .collect();
    for line in lines {
        println!("{line}");
    }
}

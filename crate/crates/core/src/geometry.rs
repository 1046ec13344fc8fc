//! Camera model, pose math, hemisphere view-space generation and region
//! clustering of candidate poses.
//!
//! Conventions are fixed so that ray generation is bit-reproducible:
//! right-handed world frame, camera looks along its local -Z axis, +Y is up
//! in the image. Look-at poses use world +Z as the up hint with a +X
//! fallback at the poles.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};

/// A rigid camera pose: `rotation` maps camera-frame vectors to world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Pose {
    /// Pose at `position` with the camera's forward axis (-Z) pointing at
    /// `target`.
    pub fn look_at(position: Vector3<f64>, target: Vector3<f64>) -> Result<Pose> {
        let to_target = target - position;
        let dist = to_target.norm();
        if dist <= 0.0 {
            return Err(Error::invalid("look-at position coincides with target"));
        }
        let forward = to_target / dist;
        let mut up = Vector3::z();
        if forward.dot(&up).abs() > 1.0 - 1e-9 {
            up = Vector3::x();
        }
        let right = forward.cross(&up).normalize();
        let true_up = right.cross(&forward);
        // Columns are the camera axes in world coordinates; -Z is forward.
        let rotation = Matrix3::from_columns(&[right, true_up, -forward]);
        Ok(Pose { position, rotation })
    }

    /// Camera forward axis expressed in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        -self.rotation.column(2)
    }

    /// Max absolute entry deviation of `R^T R` from identity.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        e.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Pinhole camera: square pixels, principal point at the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub width: u32,
    pub height: u32,
    /// Vertical field of view in radians.
    pub vfov: f64,
}

impl CameraIntrinsics {
    pub fn new(width: u32, height: u32, vfov: f64) -> Result<CameraIntrinsics> {
        if width < 1 || height < 1 {
            return Err(Error::invalid("camera dimensions must be >= 1"));
        }
        if !(vfov > 0.0 && vfov < std::f64::consts::PI) {
            return Err(Error::invalid("vertical fov must lie in (0, pi)"));
        }
        Ok(CameraIntrinsics { width, height, vfov })
    }

    /// Focal length in (full-resolution) pixels.
    pub fn focal_px(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.vfov).tan()
    }
}

/// Half-line `origin + t * direction`, `direction` unit-norm.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

/// One candidate camera placement on the view hemisphere.
#[derive(Debug, Clone)]
pub struct CandidateView {
    pub id: u32,
    pub circle_index: u32,
    pub azimuth: f64,
    pub pose: Pose,
}

/// All candidate poses: `n_circles` horizontal circles on a hemisphere
/// around `target`, each holding `poses_per_circle` evenly spaced poses.
#[derive(Debug, Clone)]
pub struct ViewSpace {
    pub views: Vec<CandidateView>,
    pub n_circles: u32,
    pub poses_per_circle: u32,
    pub middle_circle: u32,
    pub radius: f64,
    pub target: Vector3<f64>,
}

impl ViewSpace {
    pub fn view(&self, id: u32) -> Option<&CandidateView> {
        self.views.get(id as usize).filter(|v| v.id == id)
    }

    /// Ids on the middle circle, in azimuth order.
    pub fn middle_circle_ids(&self) -> Vec<u32> {
        self.views
            .iter()
            .filter(|v| v.circle_index == self.middle_circle)
            .map(|v| v.id)
            .collect()
    }
}

/// Default elevations for a five-circle hemisphere: 15..75 degrees.
pub fn default_elevations(n_circles: u32) -> Vec<f64> {
    let n = n_circles as f64;
    (0..n_circles)
        .map(|i| (i as f64 + 1.0) / (n + 1.0) * std::f64::consts::FRAC_PI_2)
        .collect()
}

/// Generates the hemisphere view space: `n_circles * poses_per_circle`
/// look-at poses, azimuths evenly spaced per circle starting at 0.
pub fn generate_view_space(
    n_circles: u32,
    poses_per_circle: u32,
    elevations: &[f64],
    radius: f64,
    target: Vector3<f64>,
) -> Result<ViewSpace> {
    if n_circles == 0 || poses_per_circle == 0 {
        return Err(Error::invalid("view space must have >= 1 circle and pose"));
    }
    if elevations.len() != n_circles as usize {
        return Err(Error::invalid(format!(
            "expected {} elevations, got {}",
            n_circles,
            elevations.len()
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("hemisphere radius must be positive"));
    }
    for (i, &e) in elevations.iter().enumerate() {
        if !(e > 0.0 && e < std::f64::consts::FRAC_PI_2) {
            return Err(Error::invalid("elevations must lie in (0, pi/2)"));
        }
        if i > 0 && e <= elevations[i - 1] {
            return Err(Error::invalid("elevations must be strictly increasing"));
        }
    }

    let mut views = Vec::with_capacity((n_circles * poses_per_circle) as usize);
    for circle in 0..n_circles {
        let elevation = elevations[circle as usize];
        for k in 0..poses_per_circle {
            let azimuth = k as f64 * std::f64::consts::TAU / poses_per_circle as f64;
            let dir = Vector3::new(
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            );
            let position = target + radius * dir;
            let pose = Pose::look_at(position, target)?;
            views.push(CandidateView {
                id: circle * poses_per_circle + k,
                circle_index: circle,
                azimuth,
                pose,
            });
        }
    }

    Ok(ViewSpace {
        views,
        n_circles,
        poses_per_circle,
        middle_circle: n_circles / 2,
        radius,
        target,
    })
}

/// Partition of the non-middle-circle views into azimuth-elevation sections.
#[derive(Debug, Clone)]
pub struct RegionClustering {
    /// `(section id, member view ids)`, lower half first, then by azimuth.
    pub sections: Vec<(u32, Vec<u32>)>,
    /// View ids on the middle circle, excluded from all sections.
    pub excluded: Vec<u32>,
}

impl RegionClustering {
    pub fn n_sections(&self) -> usize {
        self.sections.len()
    }

    /// Section id containing `view_id`, if it is not excluded.
    pub fn section_of(&self, view_id: u32) -> Option<u32> {
        self.sections
            .iter()
            .find(|(_, members)| members.contains(&view_id))
            .map(|(id, _)| *id)
    }
}

/// Splits the hemisphere into `2 * n_azimuth_bins` sections: circles below
/// the middle circle form the lower half, circles above form the upper half,
/// each half cut into contiguous half-open azimuth bins. The middle circle
/// itself is excluded.
pub fn cluster_regions(vs: &ViewSpace, n_azimuth_bins: u32) -> Result<RegionClustering> {
    if vs.n_circles < 3 {
        return Err(Error::invalid(
            "region clustering needs >= 3 circles so upper and lower halves exist",
        ));
    }
    if n_azimuth_bins == 0 || vs.poses_per_circle % n_azimuth_bins != 0 {
        return Err(Error::invalid(
            "azimuth bin count must be >= 1 and divide poses per circle",
        ));
    }

    let bin_width = std::f64::consts::TAU / n_azimuth_bins as f64;
    let mut sections: Vec<(u32, Vec<u32>)> = (0..2 * n_azimuth_bins)
        .map(|s| (s, Vec::new()))
        .collect();
    let mut excluded = Vec::new();

    for view in &vs.views {
        if view.circle_index == vs.middle_circle {
            excluded.push(view.id);
            continue;
        }
        let half_offset = if view.circle_index < vs.middle_circle {
            0
        } else {
            n_azimuth_bins
        };
        let mut bin = (view.azimuth / bin_width) as u32;
        if bin >= n_azimuth_bins {
            bin = n_azimuth_bins - 1; // azimuth == tau cannot occur; guard rounding
        }
        sections[(half_offset + bin) as usize].1.push(view.id);
    }

    for (_, members) in &mut sections {
        members.sort_unstable();
    }
    Ok(RegionClustering { sections, excluded })
}

/// One ray per downsampled pixel center, row-major, origin at the camera.
pub fn camera_rays(cam: &CameraIntrinsics, pose: &Pose, downsample: u32) -> Result<Vec<Ray>> {
    if downsample == 0 || cam.width % downsample != 0 || cam.height % downsample != 0 {
        return Err(Error::invalid(
            "downsample factor must be >= 1 and divide both image dimensions",
        ));
    }
    let (w, h) = (cam.width / downsample, cam.height / downsample);
    let focal = cam.focal_px();
    let ds = downsample as f64;
    let mut rays = Vec::with_capacity((w * h) as usize);
    for row in 0..h {
        for col in 0..w {
            let u = (col as f64 + 0.5) * ds;
            let v = (row as f64 + 0.5) * ds;
            let dir_cam = Vector3::new(
                (u - 0.5 * cam.width as f64) / focal,
                (0.5 * cam.height as f64 - v) / focal,
                -1.0,
            );
            let direction = (pose.rotation * dir_cam).normalize();
            rays.push(Ray {
                origin: pose.position,
                direction,
            });
        }
    }
    Ok(rays)
}

/// Great-circle angle between two poses as seen from `target`, in [0, pi].
pub fn spherical_distance(a: &Pose, b: &Pose, target: Vector3<f64>) -> Result<f64> {
    let u = a.position - target;
    let v = b.position - target;
    if u.norm() <= 0.0 || v.norm() <= 0.0 {
        return Err(Error::invalid("pose position coincides with target"));
    }
    let u = u.normalize();
    let v = v.normalize();
    Ok(u.cross(&v).norm().atan2(u.dot(&v)))
}

//! File formats: PPM/PGM images, raw float maps, ASCII PLY meshes, point
//! lists, the view-space text format and binary field checkpoints.

use crate::entropy::EntropyMap;
use crate::error::{Error, Result};
use crate::field::{Aabb, RadianceField};
use crate::geometry::{CandidateView, Pose, ViewSpace};
use crate::mesh::{PointCloud, TriangleMesh};
use crate::scene::Image;
use nalgebra::{Matrix3, Vector3};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[inline]
fn quantize(c: f64, maxval: f64) -> u8 {
    (c.clamp(0.0, 1.0) * maxval + 0.5).floor() as u8
}

/// Binary PPM (P6, maxval 255); channel bytes are `floor(c * 255 + 0.5)`.
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", image.width, image.height)?;
    let mut buf = Vec::with_capacity(image.pixels.len() * 3);
    for p in &image.pixels {
        buf.extend_from_slice(&[
            quantize(p[0], 255.0),
            quantize(p[1], 255.0),
            quantize(p[2], 255.0),
        ]);
    }
    f.write_all(&buf)?;
    Ok(())
}

/// Binary PGM (P5, maxval 255) of an entropy map, normalized by ln N for
/// the configured sample count: `floor(255 * h / ln N + 0.5)`.
pub fn write_entropy_pgm(path: &Path, map: &EntropyMap, n_samples: usize) -> Result<()> {
    if n_samples < 2 {
        return Err(Error::invalid("entropy PGM needs n_samples >= 2"));
    }
    let ln_n = (n_samples as f64).ln();
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", map.width, map.height)?;
    let buf: Vec<u8> = map.entropy.iter().map(|&h| quantize(h / ln_n, 255.0)).collect();
    f.write_all(&buf)?;
    Ok(())
}

const FLOAT_MAP_MAGIC: &[u8; 8] = b"NBVFMAP1";

/// Raw float dump of an entropy map: 16-byte header (magic, width, height)
/// then row-major little-endian f32 entropies.
pub fn write_entropy_f32(path: &Path, map: &EntropyMap) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(FLOAT_MAP_MAGIC)?;
    f.write_all(&map.width.to_le_bytes())?;
    f.write_all(&map.height.to_le_bytes())?;
    for &h in &map.entropy {
        f.write_all(&(h as f32).to_le_bytes())?;
    }
    Ok(())
}

/// ASCII PLY with vertex positions and triangle faces.
pub fn write_ply(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "ply")?;
    writeln!(f, "format ascii 1.0")?;
    writeln!(f, "element vertex {}", mesh.vertices.len())?;
    writeln!(f, "property float x")?;
    writeln!(f, "property float y")?;
    writeln!(f, "property float z")?;
    writeln!(f, "element face {}", mesh.triangles.len())?;
    writeln!(f, "property list uchar int vertex_indices")?;
    writeln!(f, "end_header")?;
    for v in &mesh.vertices {
        writeln!(f, "{} {} {}", v.x as f32, v.y as f32, v.z as f32)?;
    }
    for t in &mesh.triangles {
        writeln!(f, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    Ok(())
}

/// Plain text points: one `x y z` triple per line, full f64 round-trip
/// precision.
pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for p in &cloud.points {
        writeln!(f, "{} {} {}", p.x, p.y, p.z)?;
    }
    Ok(())
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    let f = BufReader::new(File::open(path)?);
    let mut points = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut it = trimmed.split_whitespace();
        let mut next = || -> Result<f64> {
            it.next()
                .ok_or_else(|| Error::Format(format!("points line {}: too few fields", lineno + 1)))?
                .parse()
                .map_err(|e| Error::Format(format!("points line {}: {e}", lineno + 1)))
        };
        points.push(Vector3::new(next()?, next()?, next()?));
    }
    Ok(PointCloud::new(points))
}

/// One view per line: `id circle azimuth px py pz r00 r01 r02 r10 .. r22`,
/// reals printed with 9 significant digits.
pub fn write_view_space(path: &Path, vs: &ViewSpace) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(
        f,
        "# viewspace circles={} per_circle={} middle={} radius={:.8e} target={:.8e} {:.8e} {:.8e}",
        vs.n_circles,
        vs.poses_per_circle,
        vs.middle_circle,
        vs.radius,
        vs.target.x,
        vs.target.y,
        vs.target.z
    )?;
    for v in &vs.views {
        write!(f, "{} {} {:.8e}", v.id, v.circle_index, v.azimuth)?;
        let p = v.pose.position;
        write!(f, " {:.8e} {:.8e} {:.8e}", p.x, p.y, p.z)?;
        for r in 0..3 {
            for c in 0..3 {
                write!(f, " {:.8e}", v.pose.rotation[(r, c)])?;
            }
        }
        writeln!(f)?;
    }
    Ok(())
}

pub fn read_view_space(path: &Path) -> Result<ViewSpace> {
    let f = BufReader::new(File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("view space file is empty".into()))??;
    let mut n_circles = 0u32;
    let mut poses_per_circle = 0u32;
    let mut middle_circle = 0u32;
    let mut radius = 0.0f64;
    let mut target = Vector3::zeros();
    for token in header.trim_start_matches('#').split_whitespace() {
        if let Some((key, value)) = token.split_once('=') {
            match key {
                "circles" => n_circles = value.parse().map_err(fmt_err)?,
                "per_circle" => poses_per_circle = value.parse().map_err(fmt_err)?,
                "middle" => middle_circle = value.parse().map_err(fmt_err)?,
                "radius" => radius = value.parse().map_err(fmt_err)?,
                "target" => target.x = value.parse().map_err(fmt_err)?,
                _ => {}
            }
        }
    }
    // The two trailing target components follow the target=x token.
    let tail: Vec<&str> = header.split_whitespace().collect();
    if let Some(pos) = tail.iter().position(|t| t.starts_with("target=")) {
        if pos + 2 < tail.len() {
            target.y = tail[pos + 1].parse().map_err(fmt_err)?;
            target.z = tail[pos + 2].parse().map_err(fmt_err)?;
        }
    }

    let mut views = Vec::new();
    for line in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != 15 {
            return Err(Error::Format(format!(
                "view line has {} fields, expected 15",
                fields.len()
            )));
        }
        let id: u32 = fields[0].parse().map_err(fmt_err)?;
        let circle_index: u32 = fields[1].parse().map_err(fmt_err)?;
        let azimuth: f64 = fields[2].parse().map_err(fmt_err)?;
        let nums: Vec<f64> = fields[3..]
            .iter()
            .map(|s| s.parse().map_err(fmt_err))
            .collect::<Result<_>>()?;
        let position = Vector3::new(nums[0], nums[1], nums[2]);
        let rotation = Matrix3::new(
            nums[3], nums[4], nums[5], nums[6], nums[7], nums[8], nums[9], nums[10], nums[11],
        );
        views.push(CandidateView {
            id,
            circle_index,
            azimuth,
            pose: Pose { position, rotation },
        });
    }
    if views.is_empty() {
        return Err(Error::Format("view space file has no views".into()));
    }
    views.sort_by_key(|v| v.id);
    Ok(ViewSpace {
        views,
        n_circles,
        poses_per_circle,
        middle_circle,
        radius,
        target,
    })
}

fn fmt_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Format(e.to_string())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"NBVFLD01";

/// Binary checkpoint: magic, bounds (6 x f32 LE), resolution (3 x u32 LE),
/// then raw densities and raw colors as little-endian f32 in x-fastest node
/// order (colors node-major r, g, b).
pub fn save_checkpoint(path: &Path, field: &RadianceField) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    for v in [field.bounds.min, field.bounds.max] {
        for a in 0..3 {
            f.write_all(&(v[a] as f32).to_le_bytes())?;
        }
    }
    for r in field.resolution {
        f.write_all(&(r as u32).to_le_bytes())?;
    }
    for &v in &field.raw_density {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    for &v in &field.raw_color {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<RadianceField> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a field checkpoint".into()));
    }
    let mut f32_buf = [0u8; 4];
    let mut read_f32 = |f: &mut BufReader<File>| -> Result<f32> {
        f.read_exact(&mut f32_buf)?;
        Ok(f32::from_le_bytes(f32_buf))
    };
    let mut bounds = [0.0f32; 6];
    for b in bounds.iter_mut() {
        *b = read_f32(&mut f)?;
    }
    let mut res = [0usize; 3];
    for r in res.iter_mut() {
        let mut buf = [0u8; 4];
        f.read_exact(&mut buf)?;
        *r = u32::from_le_bytes(buf) as usize;
    }
    let n = res[0]
        .checked_mul(res[1])
        .and_then(|v| v.checked_mul(res[2]))
        .ok_or_else(|| Error::Format("checkpoint resolution overflow".into()))?;
    if n == 0 || n > 1 << 28 {
        return Err(Error::Format("checkpoint resolution out of range".into()));
    }
    let mut payload = vec![0u8; 4 * (n + 3 * n)];
    f.read_exact(&mut payload)?;
    let floats: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(RadianceField {
        bounds: Aabb {
            min: Vector3::new(bounds[0] as f64, bounds[1] as f64, bounds[2] as f64),
            max: Vector3::new(bounds[3] as f64, bounds[4] as f64, bounds[5] as f64),
        },
        resolution: res,
        raw_density: floats[..n].to_vec(),
        raw_color: floats[n..].to_vec(),
    })
}

/// Rounds the field's parameters through f32, making the in-memory state
/// identical to what a checkpoint round-trip would produce.
pub fn quantize_to_checkpoint_precision(field: &mut RadianceField) {
    for v in field.raw_density.iter_mut() {
        *v = *v as f32 as f64;
    }
    for v in field.raw_color.iter_mut() {
        *v = *v as f32 as f64;
    }
}

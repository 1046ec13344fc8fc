//! Active 3D reconstruction with uncertainty-guided next-best-view selection.
//!
//! The pipeline trains a voxel radiance field from posed images of an analytic
//! ground-truth scene, estimates per-view uncertainty as the entropy of the
//! volume-rendering weight distribution along each ray, and selects the next
//! camera poses with one of several policies. Reconstructions are extracted
//! with marching cubes and scored against ground-truth surface points by
//! F-score.

pub mod entropy;
pub mod error;
pub mod experiment;
pub mod field;
pub mod geometry;
pub mod io;
pub mod mesh;
mod mesh_tables;
pub mod policy;
pub mod scene;

pub use error::{Error, Result};

/// Derives a labeled sub-seed from a master seed so that every source of
/// randomness in a run (training batches, random policies, point sampling)
/// is reproducible from one number.
pub fn sub_seed(master: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master
        .wrapping_add(h)
        .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

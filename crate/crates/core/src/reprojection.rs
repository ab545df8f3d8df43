//! Synthesis of partial training panoramas at virtual camera positions.
//!
//! The input RGB-D panorama is lifted to a colored point cloud and splatted
//! into a new equirectangular image at each virtual pose. Every point covers
//! exactly one target pixel; a z-buffer resolves occlusion. Pixels that
//! receive no point stay invalid, so cracks and disocclusions are left for
//! the radiance field to explain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{dir_to_pixel_index, pixel_center_dir, CameraPose, UnitDir, Vec3};
use crate::panorama::Panorama;

/// Points closer than this to the target camera are skipped.
pub const COINCIDENT_EPS: f64 = 1e-9;
/// Depths within this distance count as a z-buffer tie; the first point wins.
pub const ZBUFFER_TIE_EPS: f64 = 1e-9;
pub const DEFAULT_POSE_RADIUS: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub colors: Vec<[f32; 3]>,
    /// `(col, row)` of the source pixel.
    pub source_pixel: Vec<(usize, usize)>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A (possibly partial) panorama observed from a virtual pose.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingFrame {
    pub pose: CameraPose,
    pub pano: Panorama,
}

/// Bookkeeping from a single splatting pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    /// Points that own a pixel in the output.
    pub written: usize,
    /// Points that lost a z-buffer comparison.
    pub occluded: usize,
    /// Points coincident with the target camera.
    pub coincident: usize,
}

pub fn backproject(pano: &Panorama, pose: &CameraPose) -> Result<PointCloud> {
    let (w, h) = (pano.width(), pano.height());
    let n = pano.valid_count();
    if n == 0 {
        return Err(Error::EmptyInput("panorama has no valid pixels".into()));
    }
    let mut cloud = PointCloud {
        points: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
        source_pixel: Vec::with_capacity(n),
    };
    for row in 0..h {
        for col in 0..w {
            let i = pano.index(col, row);
            if !pano.valid()[i] {
                continue;
            }
            let dir = pixel_center_dir(col, row, w, h).vec();
            cloud
                .points
                .push(pose.position + dir * pano.depth()[i] as f64);
            cloud.colors.push(pano.color_at(i));
            cloud.source_pixel.push((col, row));
        }
    }
    Ok(cloud)
}

pub fn project_to_pose(
    cloud: &PointCloud,
    target: &CameraPose,
    width: usize,
    height: usize,
) -> Result<Panorama> {
    project_to_pose_with_stats(cloud, target, width, height).map(|(p, _)| p)
}

pub fn project_to_pose_with_stats(
    cloud: &PointCloud,
    target: &CameraPose,
    width: usize,
    height: usize,
) -> Result<(Panorama, ProjectionStats)> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud is empty".into()));
    }
    if width == 0 || height == 0 {
        return Err(Error::Shape("target panorama must have at least one pixel".into()));
    }
    let n = width * height;
    // Winning point index and its f64 depth per pixel.
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; n];
    let mut stats = ProjectionStats::default();

    for (k, &p) in cloud.points.iter().enumerate() {
        let v = p - target.position;
        let r = v.norm();
        if r < COINCIDENT_EPS {
            stats.coincident += 1;
            continue;
        }
        let dir = UnitDir::normalize(v)?;
        let (col, row) = dir_to_pixel_index(dir, width, height);
        let slot = &mut owner[row * width + col];
        match slot {
            Some((_, best)) if r >= *best - ZBUFFER_TIE_EPS => stats.occluded += 1,
            Some(_) => {
                stats.occluded += 1;
                *slot = Some((k, r));
            }
            None => *slot = Some((k, r)),
        }
    }

    let mut rgb = vec![0.0f32; 3 * n];
    let mut depth = vec![0.0f32; n];
    let mut valid = vec![false; n];
    for (i, slot) in owner.iter().enumerate() {
        if let Some((k, r)) = *slot {
            rgb[3 * i..3 * i + 3].copy_from_slice(&cloud.colors[k]);
            depth[i] = r as f32;
            valid[i] = depth[i] > 0.0;
            stats.written += 1;
        }
    }
    Ok((Panorama::new(width, height, rgb, depth, valid)?, stats))
}

/// `n` camera positions uniform in the ball of `radius` around `center`.
///
/// The first pose is always `center` itself.
pub fn sample_virtual_poses(
    center: &CameraPose,
    n: usize,
    radius: f64,
    seed: u64,
) -> Result<Vec<CameraPose>> {
    if n == 0 {
        return Err(Error::Domain("need at least one pose".into()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Domain(format!("pose radius {radius} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut poses = Vec::with_capacity(n);
    poses.push(*center);
    while poses.len() < n {
        let g = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let gn = g.norm();
        if gn < 1e-12 {
            continue;
        }
        let r = radius * rng.random::<f64>().cbrt();
        poses.push(CameraPose::new(center.position + g * (r / gn))?);
    }
    Ok(poses)
}

/// One reprojected frame per pose, at the input resolution.
pub fn generate_training_set(
    input: &Panorama,
    input_pose: &CameraPose,
    poses: &[CameraPose],
) -> Result<Vec<TrainingFrame>> {
    if poses.is_empty() {
        return Err(Error::EmptyInput("no poses to reproject to".into()));
    }
    let cloud = backproject(input, input_pose)?;
    poses
        .iter()
        .map(|pose| {
            Ok(TrainingFrame {
                pose: *pose,
                pano: project_to_pose(&cloud, pose, input.width(), input.height())?,
            })
        })
        .collect()
}

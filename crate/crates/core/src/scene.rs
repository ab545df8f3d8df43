//! Analytic box-room scene used as a ground-truth oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{panorama_ray_grid, CameraPose, Ray, Vec3};
use crate::panorama::Panorama;

/// Face order used by [`BoxScene::face_colors`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Face {
    PosX = 0,
    NegX = 1,
    PosY = 2,
    NegY = 3,
    PosZ = 4,
    NegZ = 5,
}

impl Face {
    fn from_axis(axis: usize, positive: bool) -> Self {
        match (axis, positive) {
            (0, true) => Face::PosX,
            (0, false) => Face::NegX,
            (1, true) => Face::PosY,
            (1, false) => Face::NegY,
            (2, true) => Face::PosZ,
            _ => Face::NegZ,
        }
    }
}

/// An axis-aligned room centered at `center`, viewed from inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxScene {
    pub center: Vec3,
    pub half_extents: Vec3,
    /// Colors for +x, -x, +y, -y, +z (ceiling), -z (floor).
    pub face_colors: [[f32; 3]; 6],
    pub camera: Vec3,
}

impl Default for BoxScene {
    fn default() -> Self {
        Self {
            center: Vec3::ZERO,
            half_extents: Vec3::new(1.5, 1.2, 1.0),
            face_colors: [
                [0.80, 0.40, 0.35],
                [0.35, 0.65, 0.45],
                [0.35, 0.45, 0.80],
                [0.85, 0.75, 0.40],
                [0.90, 0.90, 0.88],
                [0.50, 0.38, 0.30],
            ],
            camera: Vec3::new(0.2, -0.1, 0.0),
        }
    }
}

impl BoxScene {
    /// Camera at the center of a `2a × 2a × 2a` cube.
    pub fn cube(half: f64) -> Self {
        Self {
            half_extents: Vec3::new(half, half, half),
            camera: Vec3::ZERO,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.half_extents.to_array();
        if h.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Domain("box half-extents must be positive".into()));
        }
        let rel = (self.camera - self.center).to_array();
        if rel.iter().zip(&h).any(|(r, e)| !(r.abs() < *e)) {
            return Err(Error::Domain("camera must lie strictly inside the box".into()));
        }
        if self
            .face_colors
            .iter()
            .flatten()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(Error::Domain("face colors must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn camera_pose(&self) -> CameraPose {
        CameraPose {
            position: self.camera,
        }
    }

    /// Exit distance and face for a ray starting inside the box.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, Face)> {
        let o = (ray.origin - self.center).to_array();
        let d = ray.dir.vec().to_array();
        let h = self.half_extents.to_array();
        let mut best: Option<(f64, Face)> = None;
        for axis in 0..3 {
            if d[axis] == 0.0 {
                continue;
            }
            let positive = d[axis] > 0.0;
            let bound = if positive { h[axis] } else { -h[axis] };
            let t = (bound - o[axis]) / d[axis];
            if t >= 0.0 && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, Face::from_axis(axis, positive)));
            }
        }
        best
    }

    pub fn color(&self, face: Face) -> [f32; 3] {
        self.face_colors[face as usize]
    }
}

/// Renders the room from its camera with exact radial depths.
pub fn synth_box_scene(scene: &BoxScene, width: usize, height: usize) -> Result<Panorama> {
    scene.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::Shape("panorama must have at least one pixel".into()));
    }
    let rays = panorama_ray_grid(&scene.camera_pose(), width, height);
    let mut rgb = Vec::with_capacity(3 * rays.len());
    let mut depth = Vec::with_capacity(rays.len());
    for ray in &rays {
        let (t, face) = scene
            .intersect(ray)
            .ok_or_else(|| Error::Domain("ray escaped the box".into()))?;
        rgb.extend_from_slice(&scene.color(face));
        depth.push(t as f32);
    }
    let n = rays.len();
    Panorama::new(width, height, rgb, depth, vec![true; n])
}

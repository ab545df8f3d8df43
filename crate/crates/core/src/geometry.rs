//! Equirectangular coordinate mapping.
//!
//! Pixel `(x, y)` of a `W × H` panorama maps to the polar angle
//! `theta = pi * y / H` (measured from +z, the panorama's "up") and the
//! azimuth `phi = 2 * pi * x / W`. Directions use a right-handed frame:
//! `d = (sin(theta) cos(phi), sin(theta) sin(phi), cos(theta))`, so row 0 is
//! the zenith.
//!
//! Cameras never rotate; a [`CameraPose`] is only a position.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset added to integer pixel indices when casting rays through pixels.
///
/// The angle formulas themselves are evaluated exactly as written; ray grids
/// sample pixel centers so that column 0 and column `W` do not coincide.
pub const PIXEL_CENTER_OFFSET: f64 = 0.5;

/// Serialized as `[x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::from_array(a)
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Viewing angles of a panorama pixel: `theta` in `[0, pi]`, `phi` in `[0, 2pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Angles {
    theta: f64,
    phi: f64,
}

impl Angles {
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::Domain(format!("theta {theta} outside [0, pi]")));
        }
        if !(0.0..TAU).contains(&phi) {
            return Err(Error::Domain(format!("phi {phi} outside [0, 2pi)")));
        }
        Ok(Self { theta, phi })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }
}

/// A direction with unit Euclidean norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitDir(Vec3);

impl UnitDir {
    const NORM_TOL: f64 = 1e-9;

    /// Wraps `v` after checking that it already has unit length.
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || (n - 1.0).abs() > Self::NORM_TOL {
            return Err(Error::Domain(format!("direction norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    /// Normalizes `v`; fails on zero-length or non-finite input.
    pub fn normalize(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n < 1e-300 {
            return Err(Error::Domain(format!("cannot normalize vector of norm {n}")));
        }
        Ok(Self(v * (1.0 / n)))
    }

    pub fn vec(self) -> Vec3 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: UnitDir,
}

impl Ray {
    /// Point at distance `t` along the ray.
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir.vec() * t
    }
}

/// A virtual camera. Orientation is always the identity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CameraPose {
    pub position: Vec3,
}

impl CameraPose {
    pub fn new(position: Vec3) -> Result<Self> {
        if !position.is_finite() {
            return Err(Error::Domain("camera position must be finite".into()));
        }
        Ok(Self { position })
    }

    pub fn origin() -> Self {
        Self::default()
    }
}

pub fn pixel_to_angles(x: f64, y: f64, width: usize, height: usize) -> Result<Angles> {
    if width == 0 || height == 0 {
        return Err(Error::Domain("panorama dimensions must be positive".into()));
    }
    let (w, h) = (width as f64, height as f64);
    if !(0.0..w).contains(&x) || !(0.0..h).contains(&y) {
        return Err(Error::Domain(format!(
            "pixel ({x}, {y}) outside {width}x{height} panorama"
        )));
    }
    Ok(Angles {
        theta: PI * y / h,
        phi: TAU * x / w,
    })
}

pub fn angles_to_dir(a: Angles) -> UnitDir {
    let (st, ct) = a.theta.sin_cos();
    let (sp, cp) = a.phi.sin_cos();
    UnitDir(Vec3::new(st * cp, st * sp, ct))
}

/// Continuous pixel coordinates `(x, y)` of a direction.
///
/// At the poles the azimuth is undefined and `x = 0` is returned; the south
/// pole maps to `y = H`.
pub fn dir_to_pixel(d: UnitDir, width: usize, height: usize) -> (f64, f64) {
    let v = d.vec();
    let rho = v.x.hypot(v.y);
    let theta = rho.atan2(v.z);
    let phi = if rho == 0.0 {
        0.0
    } else {
        let p = v.y.atan2(v.x);
        let p = if p < 0.0 { p + TAU } else { p };
        if p >= TAU {
            0.0
        } else {
            p
        }
    };
    (phi * width as f64 / TAU, theta * height as f64 / PI)
}

/// Direction through the center of pixel `(col, row)`.
pub fn pixel_center_dir(col: usize, row: usize, width: usize, height: usize) -> UnitDir {
    let theta = PI * (row as f64 + PIXEL_CENTER_OFFSET) / height as f64;
    let phi = TAU * (col as f64 + PIXEL_CENTER_OFFSET) / width as f64;
    angles_to_dir(Angles { theta, phi })
}

/// Integer pixel whose footprint contains the direction.
pub fn dir_to_pixel_index(d: UnitDir, width: usize, height: usize) -> (usize, usize) {
    let (x, y) = dir_to_pixel(d, width, height);
    let col = (x.floor() as isize).rem_euclid(width as isize) as usize;
    let row = (y.floor().max(0.0) as usize).min(height - 1);
    (col, row)
}

/// Row-major `H × W` grid of rays through pixel centers.
pub fn panorama_ray_grid(pose: &CameraPose, width: usize, height: usize) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            rays.push(Ray {
                origin: pose.position,
                dir: pixel_center_dir(col, row, width, height),
            });
        }
    }
    rays
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn pixel_to_angles_examples() {
        let a = pixel_to_angles(512.0, 256.0, 1024, 512).unwrap();
        assert_abs_diff_eq!(a.theta(), PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.phi(), PI, epsilon = 1e-15);

        let a = pixel_to_angles(0.0, 0.0, 1024, 512).unwrap();
        assert_eq!((a.theta(), a.phi()), (0.0, 0.0));

        let a = pixel_to_angles(256.0, 128.0, 1024, 512).unwrap();
        assert_abs_diff_eq!(a.theta(), PI / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.phi(), PI / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn pixel_to_angles_rejects_out_of_range() {
        assert!(pixel_to_angles(1024.0, 0.0, 1024, 512).is_err());
        assert!(pixel_to_angles(0.0, -0.1, 1024, 512).is_err());
        assert!(pixel_to_angles(0.0, 0.0, 0, 512).is_err());
    }

    #[test]
    fn angles_to_dir_examples() {
        let d = angles_to_dir(Angles::new(0.0, 0.0).unwrap()).vec();
        assert_eq!(d, Vec3::new(0.0, 0.0, 1.0));

        let d = angles_to_dir(Angles::new(PI / 2.0, 0.0).unwrap()).vec();
        assert_abs_diff_eq!(d.x, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.z, 0.0, epsilon = 1e-15);

        let d = angles_to_dir(Angles::new(PI / 2.0, PI / 2.0).unwrap()).vec();
        assert_abs_diff_eq!(d.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.y, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.z, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn dir_to_pixel_examples() {
        let up = UnitDir::new(Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(dir_to_pixel(up, 1024, 512), (0.0, 0.0));

        let back = UnitDir::new(Vec3::new(-1.0, 0.0, 0.0)).unwrap();
        let (x, y) = dir_to_pixel(back, 1024, 512);
        assert_abs_diff_eq!(x, 512.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y, 256.0, epsilon = 1e-12);

        let down = UnitDir::new(Vec3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!(dir_to_pixel(down, 1024, 512), (0.0, 512.0));
    }

    #[test]
    fn round_trip_fractional_pixel() {
        let a = pixel_to_angles(137.5, 300.25, 1024, 512).unwrap();
        let (x, y) = dir_to_pixel(angles_to_dir(a), 1024, 512);
        assert_abs_diff_eq!(x, 137.5, epsilon = 1e-9);
        assert_abs_diff_eq!(y, 300.25, epsilon = 1e-9);
    }

    #[test]
    fn ray_grid_shapes_and_origins() {
        let rays = panorama_ray_grid(&CameraPose::origin(), 4, 2);
        assert_eq!(rays.len(), 8);
        for r in &rays {
            assert_eq!(r.origin, Vec3::ZERO);
            assert!((r.dir.vec().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ray_grid_center_row_near_equator() {
        let (w, h) = (1024, 512);
        let rays = panorama_ray_grid(&CameraPose::origin(), w, h);
        let center = rays[(h / 2) * w + w / 2];
        let (_, y) = dir_to_pixel(center.dir, w, h);
        let theta = PI * y / h as f64;
        assert!((theta - PI / 2.0).abs() <= 0.5 * PI / h as f64 + 1e-12);
    }

    #[test]
    fn unit_norm_many_angles() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let a = Angles::new(rng.random_range(0.0..=PI), rng.random_range(0.0..TAU)).unwrap();
            assert!((angles_to_dir(a).vec().norm() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn pixel_round_trip(x in 0.0f64..1024.0, y in 1.0f64..511.0) {
            let a = pixel_to_angles(x, y, 1024, 512).unwrap();
            let (rx, ry) = dir_to_pixel(angles_to_dir(a), 1024, 512);
            // Azimuth wraps: x close to W may come back as x - W.
            let d = rx - x;
            let dx = (d - 1024.0 * (d / 1024.0).round()).abs();
            prop_assert!(dx < 1e-6, "x {} -> {}", x, rx);
            prop_assert!((ry - y).abs() < 1e-6);
        }

        #[test]
        fn angles_monotone(x in 0.0f64..1000.0, y in 0.0f64..500.0, dx in 1e-6f64..20.0, dy in 1e-6f64..10.0) {
            let a = pixel_to_angles(x, y, 1024, 512).unwrap();
            let b = pixel_to_angles(x + dx, y + dy, 1024, 512).unwrap();
            prop_assert!(b.theta() > a.theta());
            prop_assert!(b.phi() > a.phi());
        }
    }
}

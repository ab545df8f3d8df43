//! RGB-D panorama container and a plain RGB image buffer.

use crate::error::{Error, Result};

/// An equirectangular RGB-D panorama with a per-pixel validity mask.
///
/// Colors are in `[0, 1]`, depth is the radial distance in meters. Invalid
/// pixels carry zero depth and black color.
#[derive(Debug, Clone, PartialEq)]
pub struct Panorama {
    width: usize,
    height: usize,
    rgb: Vec<f32>,
    depth: Vec<f32>,
    valid: Vec<bool>,
}

impl Panorama {
    pub fn new(
        width: usize,
        height: usize,
        rgb: Vec<f32>,
        depth: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = width * height;
        if n == 0 {
            return Err(Error::Shape("panorama must have at least one pixel".into()));
        }
        if rgb.len() != 3 * n || depth.len() != n || valid.len() != n {
            return Err(Error::Shape(format!(
                "{width}x{height} panorama needs {} rgb, {n} depth and {n} mask entries, got {}, {}, {}",
                3 * n,
                rgb.len(),
                depth.len(),
                valid.len()
            )));
        }
        let mut pano = Self {
            width,
            height,
            rgb,
            depth,
            valid,
        };
        for i in 0..n {
            if pano.valid[i] {
                let d = pano.depth[i];
                let c = &pano.rgb[3 * i..3 * i + 3];
                if !(d.is_finite() && d > 0.0) {
                    return Err(Error::Domain(format!("pixel {i}: invalid depth {d}")));
                }
                if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Domain(format!("pixel {i}: color {c:?} outside [0, 1]")));
                }
            } else {
                pano.depth[i] = 0.0;
                pano.rgb[3 * i..3 * i + 3].fill(0.0);
            }
        }
        Ok(pano)
    }

    /// A panorama with every pixel invalid.
    pub fn empty(width: usize, height: usize) -> Result<Self> {
        let n = width * height;
        Self::new(width, height, vec![0.0; 3 * n], vec![0.0; n], vec![false; n])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    pub fn rgb(&self) -> &[f32] {
        &self.rgb
    }

    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn color_at(&self, i: usize) -> [f32; 3] {
        [self.rgb[3 * i], self.rgb[3 * i + 1], self.rgb[3 * i + 2]]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.len() as f64
    }

    pub fn max_depth(&self) -> Option<f32> {
        self.depth
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(&d, _)| d)
            .reduce(f32::max)
    }

    /// Color channels as an [`Image`], invalid pixels black.
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.rgb.iter().map(|&v| v as f64).collect(),
        }
    }

    /// Box-filter downsampling by integer factors, averaging valid pixels only.
    ///
    /// Blocks without any valid pixel come out black.
    pub fn downsample_image(&self, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || self.width % width != 0 || self.height % height != 0 {
            return Err(Error::Shape(format!(
                "cannot downsample {}x{} to {width}x{height}",
                self.width, self.height
            )));
        }
        let (fx, fy) = (self.width / width, self.height / height);
        let mut data = vec![0.0; 3 * width * height];
        for row in 0..height {
            for col in 0..width {
                let mut acc = [0.0f64; 3];
                let mut count = 0usize;
                for sy in row * fy..(row + 1) * fy {
                    for sx in col * fx..(col + 1) * fx {
                        let i = self.index(sx, sy);
                        if self.valid[i] {
                            count += 1;
                            for (c, a) in acc.iter_mut().enumerate() {
                                *a += self.rgb[3 * i + c] as f64;
                            }
                        }
                    }
                }
                if count > 0 {
                    let o = 3 * (row * width + col);
                    for c in 0..3 {
                        data[o + c] = acc[c] / count as f64;
                    }
                }
            }
        }
        Image::new(width, height, data)
    }
}

/// Dense row-major RGB image with `f64` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; 3 * width * height],
        }
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Panorama::new(2, 1, vec![0.0; 5], vec![1.0; 2], vec![true; 2]).is_err());
        assert!(Panorama::new(1, 1, vec![0.0; 3], vec![-1.0], vec![true]).is_err());
        assert!(Panorama::new(1, 1, vec![1.5, 0.0, 0.0], vec![1.0], vec![true]).is_err());
    }

    #[test]
    fn invalid_pixels_are_zeroed() {
        let p = Panorama::new(1, 1, vec![0.3; 3], vec![4.0], vec![false]).unwrap();
        assert_eq!(p.depth()[0], 0.0);
        assert_eq!(p.color_at(0), [0.0; 3]);
        assert_eq!(p.max_depth(), None);
    }

    #[test]
    fn downsample_averages_valid_only() {
        let rgb = vec![0.2, 0.2, 0.2, 0.6, 0.6, 0.6, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let p = Panorama::new(2, 2, rgb, vec![1.0, 1.0, 0.0, 1.0], vec![true, true, false, true])
            .unwrap();
        let img = p.downsample_image(1, 1).unwrap();
        assert!((img.data[0] - 0.6).abs() < 1e-7);
        assert!(p.downsample_image(3, 1).is_err());
    }
}

//! PSNR, SSIM and the per-view evaluation report.

use std::fmt;

use crate::error::{Error, Result};
use crate::field::{FieldParams, Real};
use crate::geometry::CameraPose;
use crate::panorama::{Image, Panorama};
use crate::rendering::{render_panorama, SamplingConfig};
use crate::reprojection::TrainingFrame;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// PSNR in decibels; identical inputs are reported as such instead of `+inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Psnr::Identical
        } else {
            Psnr::Db(10.0 * (1.0 / mse).log10())
        }
    }

    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }

    pub fn is_identical(self) -> bool {
        self == Psnr::Identical
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.4}"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(Error::Shape(format!(
            "images are {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean squared error over pixels with `mask` set (all pixels when `None`)
/// and all channels.
pub fn mse(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64> {
    check_same(a, b)?;
    let n = a.width * a.height;
    if mask.is_some_and(|m| m.len() != n) {
        return Err(Error::Shape("mask size differs from image".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..n {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        count += 1;
        for c in 0..3 {
            sum += (a.data[3 * i + c] - b.data[3 * i + c]).powi(2);
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no pixels to compare".into()));
    }
    Ok(sum / (3 * count) as f64)
}

/// `10 log10(1 / MSE)` for images with values in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b, None)?))
}

pub fn psnr_masked(a: &Image, b: &Image, mask: &[bool]) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b, Some(mask))?))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter keeping only windows that fit inside the plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let k = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM over all full 11×11 Gaussian windows (σ = 1.5, dynamic range
/// 1), per channel and then averaged. Windows do not wrap horizontally.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{}x{} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.width, a.height
        )));
    }
    let s: f64 = (0..3)
        .map(|c| ssim_plane(&a.channel(c), &b.channel(c), a.width, a.height))
        .sum();
    Ok(s / 3.0)
}

/// A reference view to evaluate against.
#[derive(Debug, Clone)]
pub struct EvalView {
    pub name: String,
    pub pose: CameraPose,
    pub reference: Panorama,
}

impl EvalView {
    pub fn from_frames(frames: &[TrainingFrame]) -> Vec<EvalView> {
        frames
            .iter()
            .enumerate()
            .map(|(i, f)| EvalView {
                name: format!("frame{i}"),
                pose: f.pose,
                reference: f.pano.clone(),
            })
            .collect()
    }
}

/// How SSIM treats reference pixels without ground truth.
pub const SSIM_FILL_RULE: &str = "invalid reference pixels filled with rendered values";

#[derive(Debug, Clone, PartialEq)]
pub struct ViewMetrics {
    pub name: String,
    pub pose: CameraPose,
    /// Over pixels valid in the reference.
    pub psnr: Psnr,
    /// Over the densified reference.
    pub ssim: f64,
    /// Mean absolute rendered-depth error over valid reference pixels (m).
    pub depth_mae: f64,
    pub valid_fraction: f64,
    /// Externally computed LPIPS, if merged in.
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub views: Vec<ViewMetrics>,
}

impl MetricReport {
    /// Mean of the finite per-view PSNRs; `None` when every view is identical.
    pub fn mean_psnr(&self) -> Option<f64> {
        let v: Vec<f64> = self.views.iter().filter_map(|m| m.psnr.db()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.views.iter().map(|m| m.ssim).sum::<f64>() / self.views.len().max(1) as f64
    }

    pub const CSV_HEADER: &'static str = "view,x,y,z,psnr,ssim,depth_mae,valid_fraction,lpips";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for v in &self.views {
            let p = v.pose.position;
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.6},{}\n",
                v.name,
                p.x,
                p.y,
                p.z,
                v.psnr,
                v.ssim,
                v.depth_mae,
                v.valid_fraction,
                v.lpips.map(|l| l.to_string()).unwrap_or_default()
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>22} {:>10} {:>8} {:>10} {:>7}\n",
            "view", "position", "psnr_db", "ssim", "depth_mae", "valid"
        );
        for v in &self.views {
            let p = v.pose.position;
            out.push_str(&format!(
                "{:<12} {:>22} {:>10} {:>8.4} {:>10.4} {:>7.3}\n",
                v.name,
                format!("({:.3}, {:.3}, {:.3})", p.x, p.y, p.z),
                v.psnr.to_string(),
                v.ssim,
                v.depth_mae,
                v.valid_fraction
            ));
        }
        out.push_str(&format!(
            "mean psnr {}  mean ssim {:.4}  (ssim: {SSIM_FILL_RULE})\n",
            self.mean_psnr().map_or("identical".to_string(), |p| format!("{p:.4}")),
            self.mean_ssim()
        ));
        out
    }
}

/// Renders `view.pose` at the reference resolution and scores it.
pub fn evaluate_view<F: Real>(
    params: &FieldParams<F>,
    view: &EvalView,
    cfg: &SamplingConfig,
) -> Result<(Panorama, ViewMetrics)> {
    let r = &view.reference;
    let render = render_panorama(params, &view.pose, r.width(), r.height(), cfg)?;
    let rendered = render.to_image();
    let reference = r.to_image();
    let psnr = psnr_masked(&rendered, &reference, r.valid())?;
    let mut dense = reference;
    for (i, &ok) in r.valid().iter().enumerate() {
        if !ok {
            dense.data[3 * i..3 * i + 3].copy_from_slice(&rendered.data[3 * i..3 * i + 3]);
        }
    }
    let ssim = ssim(&rendered, &dense)?;
    let valid = r.valid_count();
    let depth_mae = (0..r.len())
        .filter(|&i| r.valid()[i])
        .map(|i| (render.depth()[i] as f64 - r.depth()[i] as f64).abs())
        .sum::<f64>()
        / valid as f64;
    let metrics = ViewMetrics {
        name: view.name.clone(),
        pose: view.pose,
        psnr,
        ssim,
        depth_mae,
        valid_fraction: r.valid_fraction(),
        lpips: None,
    };
    Ok((render, metrics))
}

/// One report row per view.
pub fn evaluate<F: Real>(
    params: &FieldParams<F>,
    views: &[EvalView],
    cfg: &SamplingConfig,
) -> Result<MetricReport> {
    if views.is_empty() {
        return Err(Error::EmptyInput("no reference views".into()));
    }
    let views = views
        .iter()
        .map(|v| evaluate_view(params, v, cfg).map(|(_, m)| m))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { views })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Architecture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..3 * w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = noise_image(8, 4, 1);
        assert!(psnr(&a, &a).unwrap().is_identical());
        let z = Image::filled(8, 4, 0.0);
        let b = Image::filled(8, 4, 0.1);
        assert!((psnr(&z, &b).unwrap().db().unwrap() - 20.0).abs() < 1e-9);
        let c = Image::filled(8, 4, 0.5);
        assert!((psnr(&z, &c).unwrap().db().unwrap() - 6.0206).abs() < 1e-4);
        assert!(psnr(&z, &Image::filled(4, 8, 0.0)).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = Image::filled(16, 16, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let offsets: Vec<f64> = (0..base.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = [0.01, 0.05, 0.2]
            .iter()
            .map(|amp| {
                let noisy = Image::new(16, 16, base.data.iter().zip(&offsets).map(|(v, o)| v + amp * o).collect()).unwrap();
                psnr(&base, &noisy).unwrap().db().unwrap()
            })
            .collect();
        assert!(values[0] > values[1] && values[1] > values[2]);
    }

    #[test]
    fn masked_psnr_ignores_invalid() {
        let a = Image::filled(2, 1, 0.0);
        let b = Image::new(2, 1, vec![0.1, 0.1, 0.1, 0.9, 0.9, 0.9]).unwrap();
        let p = psnr_masked(&a, &b, &[true, false]).unwrap();
        assert!((p.db().unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr_masked(&a, &b, &[false, false]).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = noise_image(16, 12, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let z = Image::filled(11, 11, 0.0);
        let o = Image::filled(11, 11, 1.0);
        let c1 = SSIM_K1 * SSIM_K1;
        let s = ssim(&z, &o).unwrap();
        assert!((s - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!((s - 9.999e-5).abs() < 1e-9);
        let b = noise_image(16, 12, 3);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&Image::filled(10, 20, 0.0), &Image::filled(10, 20, 0.0)).is_err());
    }

    #[test]
    fn ssim_bounded_for_correlated_pairs() {
        let a = noise_image(24, 16, 4);
        for amp in [0.05, 0.2, 0.5] {
            let n = noise_image(24, 16, 5);
            let b = Image::new(24, 16, a.data.iter().zip(&n.data).map(|(x, e)| x + amp * (e - 0.5)).collect()).unwrap();
            let s = ssim(&a, &b).unwrap();
            assert!(s > 0.0 && s <= 1.0, "{s}");
        }
    }

    #[test]
    fn gaussian_kernel_normalized_and_symmetric() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(k[i], k[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn evaluate_rows_and_determinism() {
        let scene = crate::scene::BoxScene::default();
        let pano = crate::scene::synth_box_scene(&scene, 24, 12).unwrap();
        let params = FieldParams::<f32>::init(Architecture::desk(), 1).unwrap();
        let cfg = SamplingConfig {
            n_coarse: 8,
            n_fine: 8,
            near: 0.05,
            far: 2.5,
            ..SamplingConfig::default()
        }
        .deterministic();
        let views = vec![
            EvalView {
                name: "input".into(),
                pose: scene.camera_pose(),
                reference: pano.clone(),
            },
            EvalView {
                name: "other".into(),
                pose: scene.camera_pose(),
                reference: pano,
            },
        ];
        let a = evaluate(&params, &views, &cfg).unwrap();
        let b = evaluate(&params, &views, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.views.len(), 2);
        let csv = a.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().ends_with(','));
        assert!(a.to_table().contains("input"));
        assert!(evaluate(&params, &[], &cfg).is_err());
    }
}

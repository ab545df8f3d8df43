//! Panorama file formats.
//!
//! - color: 8-bit RGB PNG, values mapped to `[0, 1]`
//! - depth: PFM (single channel, little-endian, stored verbatim) or 16-bit
//!   grayscale PNG multiplied by a depth scale; zero depth marks an invalid pixel
//! - valid mask: 1-bit grayscale PNG, white = valid

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use png::{BitDepth, ColorType};

use crate::error::{Error, Result};
use crate::panorama::Panorama;

/// Decoded raster: width, height and row-major samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(data).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

struct RawPng {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    line_size: usize,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<RawPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(|e| png_err(path, e))?;
    data.truncate(info.buffer_size());
    Ok(RawPng {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        line_size: info.line_size,
        data,
    })
}

/// Writes `rgb` (row-major, three values per pixel in `[0, 1]`) as 8-bit PNG.
pub fn write_rgb_png(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[f32]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Shape(format!("{width}x{height} RGB needs {} values", 3 * width * height)));
    }
    let bytes: Vec<u8> = rgb
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_png(path.as_ref(), width, height, ColorType::Rgb, BitDepth::Eight, &bytes)
}

/// Reads an 8- or 16-bit RGB(A) or grayscale PNG as RGB in `[0, 1]`.
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<Raster<f32>> {
    let path = path.as_ref();
    let raw = read_png(path)?;
    let channels = match raw.color {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(png_err(path, "indexed color is not supported")),
    };
    let (bytes, max) = match raw.depth {
        BitDepth::Eight => (1, 255.0f32),
        BitDepth::Sixteen => (2, 65535.0),
        d => return Err(png_err(path, format!("unsupported bit depth {d:?}"))),
    };
    let sample = |row: usize, k: usize| -> f32 {
        let o = row * raw.line_size + k * bytes;
        let v = if bytes == 1 {
            raw.data[o] as f32
        } else {
            u16::from_be_bytes([raw.data[o], raw.data[o + 1]]) as f32
        };
        v / max
    };
    let mut data = Vec::with_capacity(3 * raw.width * raw.height);
    for row in 0..raw.height {
        for col in 0..raw.width {
            let base = col * channels;
            if channels < 3 {
                let g = sample(row, base);
                data.extend([g, g, g]);
            } else {
                data.extend((0..3).map(|c| sample(row, base + c)));
            }
        }
    }
    Ok(Raster {
        width: raw.width,
        height: raw.height,
        channels: 3,
        data,
    })
}

/// Writes depth as 16-bit grayscale PNG with `value = round(depth / scale)`.
pub fn write_depth_png16(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    depth: &[f32],
    scale: f64,
) -> Result<()> {
    check_scale(scale)?;
    if depth.len() != width * height {
        return Err(Error::Shape(format!("{width}x{height} depth needs {} values", width * height)));
    }
    let mut bytes = Vec::with_capacity(2 * depth.len());
    for &d in depth {
        let v = (d as f64 / scale).round().clamp(0.0, u16::MAX as f64) as u16;
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    write_png(path.as_ref(), width, height, ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}

/// Reads a 16-bit grayscale PNG as depth `value · scale` in meters.
pub fn read_depth_png16(path: impl AsRef<Path>, scale: f64) -> Result<Raster<f32>> {
    check_scale(scale)?;
    let path = path.as_ref();
    let raw = read_png(path)?;
    if raw.color != ColorType::Grayscale || raw.depth != BitDepth::Sixteen {
        return Err(png_err(path, "depth PNG must be 16-bit grayscale"));
    }
    let mut data = Vec::with_capacity(raw.width * raw.height);
    for row in 0..raw.height {
        let line = &raw.data[row * raw.line_size..];
        for col in 0..raw.width {
            let v = u16::from_be_bytes([line[2 * col], line[2 * col + 1]]);
            data.push((v as f64 * scale) as f32);
        }
    }
    Ok(Raster {
        width: raw.width,
        height: raw.height,
        channels: 1,
        data,
    })
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("depth scale {scale} must be positive")))
    }
}

/// Writes a single-channel little-endian PFM (rows stored bottom to top).
pub fn write_pfm(path: impl AsRef<Path>, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    if values.len() != width * height {
        return Err(Error::Shape(format!("{width}x{height} PFM needs {} values", width * height)));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    bytes.reserve(4 * values.len());
    for row in (0..height).rev() {
        for v in &values[row * width..(row + 1) * width] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn pfm_token(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(|e| Error::io(path, e))?;
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    String::from_utf8(tok).map_err(|_| Error::Format(format!("{}: bad PFM header", path.display())))
}

/// Reads a PFM file; color PFMs keep their first channel.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<Raster<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let channels = match pfm_token(&mut r, path)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("not a PFM file")),
    };
    let width: usize = pfm_token(&mut r, path)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = pfm_token(&mut r, path)?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = pfm_token(&mut r, path)?.parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("bad scale"));
    }
    let little = scale < 0.0;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != 4 * channels * width * height {
        return Err(bad("pixel data has the wrong length"));
    }
    let mut data = vec![0.0f32; width * height];
    for (k, chunk) in body.chunks_exact(4 * channels).enumerate() {
        let b: [u8; 4] = chunk[..4].try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row_from_bottom, col) = (k / width, k % width);
        data[(height - 1 - row_from_bottom) * width + col] = v;
    }
    Ok(Raster {
        width,
        height,
        channels: 1,
        data,
    })
}

/// Writes a 1-bit grayscale PNG.
pub fn write_mask_png(path: impl AsRef<Path>, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != width * height {
        return Err(Error::Shape(format!("{width}x{height} mask needs {} values", width * height)));
    }
    let stride = width.div_ceil(8);
    let mut bytes = vec![0u8; stride * height];
    for row in 0..height {
        for col in 0..width {
            if mask[row * width + col] {
                bytes[row * stride + col / 8] |= 0x80 >> (col % 8);
            }
        }
    }
    write_png(path.as_ref(), width, height, ColorType::Grayscale, BitDepth::One, &bytes)
}

/// Reads a grayscale mask PNG of any bit depth; nonzero means valid.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Raster<bool>> {
    let path = path.as_ref();
    let raw = read_png(path)?;
    if raw.color != ColorType::Grayscale {
        return Err(png_err(path, "mask PNG must be grayscale"));
    }
    let bits = raw.depth as usize;
    let mut data = Vec::with_capacity(raw.width * raw.height);
    for row in 0..raw.height {
        let line = &raw.data[row * raw.line_size..(row + 1) * raw.line_size];
        for col in 0..raw.width {
            let bit = col * bits;
            let v = if bits >= 8 {
                line[bit / 8..bit / 8 + bits / 8].iter().any(|&b| b != 0)
            } else {
                let shift = 8 - bits - bit % 8;
                (line[bit / 8] >> shift) & ((1 << bits) - 1) != 0
            };
            data.push(v);
        }
    }
    Ok(Raster {
        width: raw.width,
        height: raw.height,
        channels: 1,
        data,
    })
}

fn is_pfm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"))
}

/// Reads depth from PFM (verbatim) or 16-bit PNG (times `scale`), chosen
/// by file extension.
pub fn read_depth(path: impl AsRef<Path>, scale: f64) -> Result<Raster<f32>> {
    let path = path.as_ref();
    check_scale(scale)?;
    if is_pfm(path) {
        read_pfm(path)
    } else {
        read_depth_png16(path, scale)
    }
}

pub fn write_depth(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    depth: &[f32],
    scale: f64,
) -> Result<()> {
    let path = path.as_ref();
    if is_pfm(path) {
        write_pfm(path, width, height, depth)
    } else {
        write_depth_png16(path, width, height, depth, scale)
    }
}

/// Assembles a panorama from a color PNG and a depth map. Pixels whose
/// depth is zero (or negative, or not finite) are invalid; an optional mask
/// invalidates further pixels.
pub fn load_panorama(
    rgb_path: impl AsRef<Path>,
    depth_path: impl AsRef<Path>,
    depth_scale: f64,
    mask_path: Option<&Path>,
) -> Result<Panorama> {
    check_scale(depth_scale)?;
    let rgb = read_rgb_png(rgb_path)?;
    let depth = read_depth(depth_path, depth_scale)?;
    if rgb.width != depth.width || rgb.height != depth.height {
        return Err(Error::Shape(format!(
            "color is {}x{} but depth is {}x{}",
            rgb.width, rgb.height, depth.width, depth.height
        )));
    }
    let mut valid: Vec<bool> = depth.data.iter().map(|d| d.is_finite() && *d > 0.0).collect();
    if let Some(mp) = mask_path {
        let mask = read_mask_png(mp)?;
        if mask.width != rgb.width || mask.height != rgb.height {
            return Err(Error::Shape("mask size differs from color".into()));
        }
        for (v, m) in valid.iter_mut().zip(&mask.data) {
            *v &= *m;
        }
    }
    let depth = depth
        .data
        .iter()
        .zip(&valid)
        .map(|(&d, &v)| if v { d } else { 0.0 })
        .collect();
    Panorama::new(rgb.width, rgb.height, rgb.data, depth, valid)
}

/// Writes color, depth and (when given) the valid mask of a panorama.
pub fn save_panorama(
    pano: &Panorama,
    rgb_path: impl AsRef<Path>,
    depth_path: impl AsRef<Path>,
    depth_scale: f64,
    mask_path: Option<&Path>,
) -> Result<()> {
    let (w, h) = (pano.width(), pano.height());
    write_rgb_png(rgb_path, w, h, pano.rgb())?;
    write_depth(depth_path, w, h, pano.depth(), depth_scale)?;
    if let Some(mp) = mask_path {
        write_mask_png(mp, w, h, pano.valid())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let (w, h) = (1024, 512);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f32> = (0..w * h).map(|_| rng.random::<f32>() * 10.0).collect();
        write_pfm(&path, w, h, &vals).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!((back.width, back.height), (w, h));
        assert!(back.data.iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        write_pfm(&path, 1, 2, &[1.0, 2.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let body = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(body[..4].try_into().unwrap()), 2.0);
    }

    #[test]
    fn depth_png_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        write_depth_png16(&path, 2, 1, &[1.0, 0.0], 0.001).unwrap();
        let raw = read_png(&path).unwrap();
        assert_eq!(u16::from_be_bytes([raw.data[0], raw.data[1]]), 1000);
        let back = read_depth_png16(&path, 0.001).unwrap();
        assert_eq!(back.data, vec![1.0, 0.0]);
        assert!(read_depth_png16(&path, 0.0).is_err());
    }

    #[test]
    fn mask_round_trip_is_one_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let (w, h) = (13, 5);
        let mask: Vec<bool> = (0..w * h).map(|i| (i * 7) % 3 == 0).collect();
        write_mask_png(&path, w, h, &mask).unwrap();
        let raw = read_png(&path).unwrap();
        assert_eq!(raw.depth, BitDepth::One);
        assert_eq!(read_mask_png(&path).unwrap().data, mask);
    }

    #[test]
    fn rgb_png_round_trip_on_8_bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let rgb: Vec<f32> = (0..3 * 6).map(|i| (i * 13 % 256) as f32 / 255.0).collect();
        write_rgb_png(&path, 3, 2, &rgb).unwrap();
        let back = read_rgb_png(&path).unwrap();
        assert_eq!(back.data, rgb);
    }

    #[test]
    fn load_panorama_marks_zero_depth_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("c.png");
        let d = dir.path().join("d.png");
        write_rgb_png(&c, 2, 1, &[0.2; 6]).unwrap();
        write_depth_png16(&d, 2, 1, &[1.0, 0.0], 0.001).unwrap();
        let p = load_panorama(&c, &d, 0.001, None).unwrap();
        assert_eq!(p.valid(), &[true, false]);
        assert_eq!(p.depth(), &[1.0, 0.0]);
        assert!(load_panorama(&c, &d, -1.0, None).is_err());

        let d2 = dir.path().join("d2.pfm");
        write_pfm(&d2, 1, 1, &[1.0]).unwrap();
        assert!(matches!(load_panorama(&c, &d2, 1.0, None), Err(Error::Shape(_))));
        assert!(matches!(
            load_panorama(dir.path().join("missing.png"), &d, 1.0, None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn save_and_load_panorama() {
        let dir = tempfile::tempdir().unwrap();
        let scene = crate::scene::BoxScene::default();
        let pano = crate::scene::synth_box_scene(&scene, 16, 8).unwrap();
        let (c, d, m) = (dir.path().join("c.png"), dir.path().join("d.pfm"), dir.path().join("m.png"));
        save_panorama(&pano, &c, &d, 1.0, Some(&m)).unwrap();
        let back = load_panorama(&c, &d, 1.0, Some(&m)).unwrap();
        assert_eq!(back.depth(), pano.depth());
        assert_eq!(back.valid(), pano.valid());
        for (a, b) in back.rgb().iter().zip(pano.rgb()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }
}

//! PNG heatmaps with a fixed perceptual colormap.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Viridis sampled at eleven evenly spaced levels.
const VIRIDIS: [[u8; 3]; 11] = [
    [68, 1, 84],
    [72, 36, 117],
    [65, 68, 135],
    [53, 95, 141],
    [42, 120, 142],
    [33, 145, 140],
    [34, 168, 132],
    [68, 191, 112],
    [122, 209, 81],
    [189, 223, 38],
    [253, 231, 37],
];

const CONTOUR_RGB: [u8; 3] = [230, 30, 30];

/// Colour at `t ∈ [0, 1]`, linearly interpolated; out-of-range values clamp.
pub fn viridis(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let a = VIRIDIS[i][c] as f64;
        let b = VIRIDIS[i + 1][c] as f64;
        out[c] = (a + f * (b - a)).round() as u8;
    }
    out
}

/// `<stem>_min<lo>_max<hi>.png` next to `stem`.
pub fn heatmap_path(stem: &Path, lo: f64, hi: f64) -> PathBuf {
    let name = stem.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    stem.with_file_name(format!("{name}_min{lo:.0}_max{hi:.0}.png"))
}

/// RGB image of `values` (axis 0 down, axis 1 across), each cell drawn as a
/// `scale`×`scale` block, with optional contour points overlaid.
pub fn heatmap_rgb(values: &Array2<f64>, scale: usize, contours: &[Vec<(f64, f64)>]) -> (usize, usize, Vec<u8>) {
    let (n0, n1) = values.dim();
    let scale = scale.max(1);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = (n0 * scale, n1 * scale);
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let rgb = viridis((values[[y / scale, x / scale]] - lo) / span);
            buf[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&rgb);
        }
    }
    for poly in contours {
        for &(a, b) in poly {
            let y = ((a + 0.5) * scale as f64).floor();
            let x = ((b + 0.5) * scale as f64).floor();
            if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                let k = (y as usize * w + x as usize) * 3;
                buf[k..k + 3].copy_from_slice(&CONTOUR_RGB);
            }
        }
    }
    (w, h, buf)
}

/// Writes the heatmap and returns the self-describing file name used.
pub fn write_heatmap(stem: &Path, values: &Array2<f64>, scale: usize, contours: &[Vec<(f64, f64)>]) -> Result<PathBuf> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let path = heatmap_path(stem, lo, hi);
    let (w, h, buf) = heatmap_rgb(values, scale, contours);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(&buf).map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(path)
}

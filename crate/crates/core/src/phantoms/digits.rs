//! Procedural handwritten-style digit glyphs on a 28×28 canvas, used as a
//! stand-in image source when no MNIST files are available.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Stroke {
    (0..=24).map(|i| {
        let a = 2.0 * PI * i as f64 / 24.0;
        (cx + rx * a.cos(), cy + ry * a.sin())
    })
    .collect()
}

/// Strokes in the unit box, `x` to the right and `y` down.
fn glyph(digit: u8) -> Vec<Stroke> {
    match digit % 10 {
        0 => vec![ellipse(0.5, 0.5, 0.3, 0.45)],
        1 => vec![vec![(0.35, 0.2), (0.5, 0.05), (0.5, 0.95)]],
        2 => vec![vec![(0.2, 0.25), (0.3, 0.1), (0.5, 0.05), (0.7, 0.1), (0.8, 0.25), (0.75, 0.45), (0.2, 0.95), (0.85, 0.95)]],
        3 => vec![vec![
            (0.2, 0.1),
            (0.5, 0.05),
            (0.75, 0.15),
            (0.75, 0.35),
            (0.45, 0.5),
            (0.75, 0.62),
            (0.8, 0.8),
            (0.55, 0.95),
            (0.2, 0.9),
        ]],
        4 => vec![vec![(0.65, 0.95), (0.65, 0.05), (0.15, 0.7), (0.85, 0.7)]],
        5 => vec![vec![(0.8, 0.05), (0.25, 0.05), (0.2, 0.45), (0.55, 0.4), (0.8, 0.55), (0.8, 0.8), (0.55, 0.95), (0.2, 0.88)]],
        6 => vec![vec![
            (0.7, 0.05),
            (0.4, 0.2),
            (0.25, 0.5),
            (0.25, 0.75),
            (0.45, 0.95),
            (0.7, 0.85),
            (0.75, 0.65),
            (0.5, 0.5),
            (0.27, 0.6),
        ]],
        7 => vec![vec![(0.15, 0.05), (0.85, 0.05), (0.4, 0.95)]],
        8 => vec![ellipse(0.5, 0.27, 0.22, 0.22), ellipse(0.5, 0.72, 0.27, 0.23)],
        _ => vec![ellipse(0.5, 0.3, 0.25, 0.22), vec![(0.75, 0.3), (0.6, 0.95)]],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// One glyph with jittered control points, slant and stroke width.
pub fn render_digit<R: Rng>(digit: u8, rng: &mut R) -> Array2<u8> {
    let slant = rng.random_range(-0.25..0.25);
    let half_width = rng.random_range(0.045..0.085);
    let strokes: Vec<Stroke> = glyph(digit)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(x, y)| {
                    let jx = rng.random_range(-0.04..0.04);
                    let jy = rng.random_range(-0.04..0.04);
                    (x + jx + slant * (0.5 - y), y + jy)
                })
                .collect()
        })
        .collect();
    // The glyph box spans the central 20 pixels, as in MNIST.
    let box_px = 20.0;
    let margin = (SIDE as f64 - box_px) / 2.0;
    let aa = 0.6 / box_px;
    Array2::from_shape_fn((SIDE, SIDE), |(row, col)| {
        let p = ((col as f64 + 0.5 - margin) / box_px, (row as f64 + 0.5 - margin) / box_px);
        let d = strokes
            .iter()
            .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        let v = (1.0 - (d - half_width) / aa).clamp(0.0, 1.0);
        (v * 255.0).round() as u8
    })
}

/// `(images, labels)` with labels cycling `0..10`; image `i` uses its own stream.
pub fn synthetic_digits(n: usize, seed: u64) -> (Array3<u8>, Vec<u8>) {
    let mut images = Array3::zeros((n, SIDE, SIDE));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let label = (i % 10) as u8;
        images.slice_mut(ndarray::s![i, .., ..]).assign(&render_digit(label, &mut rng));
        labels.push(label);
    }
    (images, labels)
}

//! Digit images turned into SoS maps: affine augmentation, random erasing,
//! intensity scaling, then placement inside the transducer ring.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::WATER_SOS;
use crate::error::{Error, Result};
use crate::grid::{Grid2D, SosMap};

/// SoS inside the ring where the image is dark, m/s.
pub const MNIST_BIAS: f64 = 1550.0;
/// SoS added per unit image intensity, m/s.
pub const MNIST_SCALE: f64 = 666.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rotation_deg: f64,
    pub translation_px: f64,
    pub scale: (f64, f64),
    pub shear_deg: f64,
    pub erase_prob: f64,
    /// Erased area as a fraction of the canvas.
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    pub intensity: (f64, f64),
    /// Final rotation drawn from `±final_rotation_deg`.
    pub final_rotation_deg: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotation_deg: 30.0,
            translation_px: 5.0,
            scale: (0.8, 1.2),
            shear_deg: 10.0,
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
            intensity: (0.3, 1.2),
            final_rotation_deg: 180.0,
        }
    }
}

impl AugmentSpec {
    /// No augmentation at all.
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translation_px: 0.0,
            scale: (1.0, 1.0),
            shear_deg: 0.0,
            erase_prob: 0.0,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
            intensity: (1.0, 1.0),
            final_rotation_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if !(range_ok(self.scale) && self.scale.0 > 0.0) {
            return Err(Error::InvalidArgument(format!("augmentation scale range {:?} must be positive", self.scale)));
        }
        if !(range_ok(self.intensity) && self.intensity.0 >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid intensity range {:?}", self.intensity)));
        }
        if !(range_ok(self.erase_area) && range_ok(self.erase_aspect) && self.erase_aspect.0 > 0.0) {
            return Err(Error::InvalidArgument("invalid random-erase ranges".into()));
        }
        if !(0.0..=1.0).contains(&self.erase_prob) || self.shear_deg.abs() >= 90.0 {
            return Err(Error::InvalidArgument("invalid erase probability or shear".into()));
        }
        Ok(())
    }
}

/// The random parameters actually used for one map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub rotation_deg: f64,
    pub translation_px: (f64, f64),
    pub scale: f64,
    pub shear_deg: f64,
    /// `(row, col, height, width)` of the erased block.
    pub erase: Option<(usize, usize, usize, usize)>,
    pub intensity: f64,
    pub final_rotation_deg: f64,
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Bilinear lookup at fractional `(row, col)`, zero outside the image.
pub fn bilinear(img: ArrayView2<f64>, r: f64, c: f64) -> f64 {
    let (h, w) = img.dim();
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let at = |i: f64, j: f64| -> f64 {
        if i < 0.0 || j < 0.0 || i >= h as f64 || j >= w as f64 {
            0.0
        } else {
            img[[i as usize, j as usize]]
        }
    };
    at(r0, c0) * (1.0 - fr) * (1.0 - fc) + at(r0 + 1.0, c0) * fr * (1.0 - fc) + at(r0, c0 + 1.0) * (1.0 - fr) * fc
        + at(r0 + 1.0, c0 + 1.0) * fr * fc
}

/// Rotation, shear and scale about the centre, then translation; sampled by
/// inverse mapping.
fn affine(img: &Array2<f64>, rot_deg: f64, shear_deg: f64, scale: f64, shift: (f64, f64)) -> Array2<f64> {
    let (h, w) = img.dim();
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = (rot_deg * PI / 180.0).sin_cos();
    let k = (shear_deg * PI / 180.0).tan();
    // Forward map on (x = col, y = row): A = R · [[1, k], [0, 1]] · s.
    let a = [[c * scale, (c * k - s) * scale], [s * scale, (s * k + c) * scale]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    Array2::from_shape_fn((h, w), |(r, col)| {
        let x = col as f64 - cc - shift.0;
        let y = r as f64 - cr - shift.1;
        let sx = inv[0][0] * x + inv[0][1] * y + cc;
        let sy = inv[1][0] * x + inv[1][1] * y + cr;
        bilinear(img.view(), sy, sx)
    })
}

/// Augmented SoS map for one image. The square image is inscribed in the
/// circle of `disk_diameter` metres centred on the grid.
pub fn mnist_sos_map<R: Rng>(
    image: ArrayView2<u8>,
    spec: &AugmentSpec,
    grid: &Grid2D,
    disk_diameter: f64,
    rng: &mut R,
) -> Result<(SosMap, AugmentDraw)> {
    spec.validate()?;
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let unit = image.mapv(|v| v as f64 / 255.0);
    let rotation_deg = uniform(rng, -spec.rotation_deg, spec.rotation_deg);
    let translation_px = (
        uniform(rng, -spec.translation_px, spec.translation_px),
        uniform(rng, -spec.translation_px, spec.translation_px),
    );
    let scale = uniform(rng, spec.scale.0, spec.scale.1);
    let shear_deg = uniform(rng, -spec.shear_deg, spec.shear_deg);
    let mut img = affine(&unit, rotation_deg, shear_deg, scale, translation_px);

    let mut erase = None;
    if rng.random::<f64>() < spec.erase_prob {
        let area = uniform(rng, spec.erase_area.0, spec.erase_area.1) * (h * w) as f64;
        let aspect = uniform(rng, spec.erase_aspect.0.ln(), spec.erase_aspect.1.ln()).exp();
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh < h && ew < w {
            let r0 = rng.random_range(0..=h - eh);
            let c0 = rng.random_range(0..=w - ew);
            img.slice_mut(ndarray::s![r0..r0 + eh, c0..c0 + ew]).fill(0.0);
            erase = Some((r0, c0, eh, ew));
        }
    }
    let intensity = uniform(rng, spec.intensity.0, spec.intensity.1);
    img.mapv_inplace(|v| v * intensity);
    let final_rotation_deg = uniform(rng, -spec.final_rotation_deg, spec.final_rotation_deg);

    let radius = disk_diameter / 2.0 / grid.dx;
    let side = radius * std::f64::consts::SQRT_2;
    let (cx, cz) = grid.centre();
    let (s, c) = (final_rotation_deg * PI / 180.0).sin_cos();
    let (ir, ic) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let values = Array2::from_shape_fn(grid.shape(), |(ix, iz)| {
        let (px, pz) = (ix as f64 - cx, iz as f64 - cz);
        if px * px + pz * pz > radius * radius {
            return WATER_SOS;
        }
        // Undo the final rotation, then map the inscribed square onto the image.
        let (qx, qz) = (c * px + s * pz, -s * px + c * pz);
        let r = qx / side * h as f64 + ir;
        let col = qz / side * w as f64 + ic;
        MNIST_BIAS + MNIST_SCALE * bilinear(img.view(), r, col)
    });
    let draw = AugmentDraw { rotation_deg, translation_px, scale, shear_deg, erase, intensity, final_rotation_deg };
    Ok((SosMap::new(*grid, values)?, draw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantoms::digits::synthetic_digits;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_grid() -> Grid2D {
        Grid2D::new(64, 64, 1500.0 / 350e3 / 8.0, 90.243e-9, 10).unwrap()
    }

    fn disk() -> f64 {
        44.0 * 1500.0 / 350e3 / 8.0
    }

    fn inside(grid: &Grid2D, ix: usize, iz: usize) -> bool {
        let (cx, cz) = grid.centre();
        let r = disk() / 2.0 / grid.dx;
        (ix as f64 - cx).powi(2) + (iz as f64 - cz).powi(2) <= r * r
    }

    #[test]
    fn dark_image_gives_bias_inside_and_water_outside() {
        let grid = desk_grid();
        let img = Array2::<u8>::zeros((28, 28));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (map, _) = mnist_sos_map(img.view(), &AugmentSpec::default(), &grid, disk(), &mut rng).unwrap();
        for ((ix, iz), v) in map.values.indexed_iter() {
            let want = if inside(&grid, ix, iz) { 1550.0 } else { 1500.0 };
            assert_eq!(*v, want);
        }
    }

    #[test]
    fn full_intensity_pixel_maps_to_2216() {
        let grid = desk_grid();
        let img = Array2::<u8>::from_elem((28, 28), 255);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (map, _) = mnist_sos_map(img.view(), &AugmentSpec::identity(), &grid, disk(), &mut rng).unwrap();
        let (cx, cz) = (31, 32);
        assert!((map.values[[cx, cz]] - 2216.0).abs() < 1e-9);
    }

    #[test]
    fn values_stay_in_range_over_seeded_samples() {
        let grid = desk_grid();
        let (imgs, _) = synthetic_digits(100, 4);
        let hi = 1550.0 + 666.0 * 1.2;
        for i in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let (map, draw) =
                mnist_sos_map(imgs.index_axis(ndarray::Axis(0), i), &AugmentSpec::default(), &grid, disk(), &mut rng)
                    .unwrap();
            assert!((0.3..=1.2).contains(&draw.intensity));
            for ((ix, iz), v) in map.values.indexed_iter() {
                if inside(&grid, ix, iz) {
                    assert!((1550.0..=hi + 1e-9).contains(v), "{v}");
                } else {
                    assert_eq!(*v, 1500.0);
                }
            }
        }
    }

    #[test]
    fn identity_affine_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Array2::from_shape_simple_fn((9, 7), || rng.random::<f64>());
        let out = affine(&img, 0.0, 0.0, 1.0, (0.0, 0.0));
        for (a, b) in img.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // A whole-pixel translation moves content by exactly one column.
        let moved = affine(&img, 0.0, 0.0, 1.0, (1.0, 0.0));
        assert!((moved[[4, 3]] - img[[4, 2]]).abs() < 1e-12);
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = AugmentSpec { scale: (0.0, 1.0), ..AugmentSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Array2::<u8>::zeros((28, 28));
        assert!(mnist_sos_map(img.view(), &spec, &desk_grid(), disk(), &mut rng).is_err());
    }
}

//! Forearm-like phantoms: an elliptical limb with skin, fat and muscle
//! layers, two bones and an optional edema inclusion.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{TissueMap, WATER_SOS};
use crate::error::{Error, Result};
use crate::grid::{Grid2D, SosMap};

pub const BACKGROUND: u8 = 0;
pub const SKIN: u8 = 1;
pub const FAT: u8 = 2;
pub const MUSCLE: u8 = 3;
pub const BONE: u8 = 4;
pub const EDEMA: u8 = 5;

/// SoS range per label, m/s.
pub fn tissue_range(label: u8) -> (f64, f64) {
    match label {
        SKIN => (1530.0, 1560.0),
        FAT => (1420.0, 1450.0),
        MUSCLE => (1570.0, 1620.0),
        BONE => (2700.0, 3000.0),
        EDEMA => (1450.0, 1500.0),
        _ => (WATER_SOS, WATER_SOS),
    }
}

/// Geometry priors. Lengths are fractions of the ring radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    pub semi_major: (f64, f64),
    pub semi_minor: (f64, f64),
    pub centre_jitter: f64,
    pub skin: (f64, f64),
    pub fat: (f64, f64),
    pub bone_radius: (f64, f64),
    pub edema_semi_axes: (f64, f64),
    /// Minimum muscle margin around bones and edema, cells.
    pub clearance_cells: f64,
    pub max_attempts: usize,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            semi_major: (0.72, 0.86),
            semi_minor: (0.58, 0.70),
            centre_jitter: 0.04,
            skin: (0.05, 0.08),
            fat: (0.06, 0.10),
            bone_radius: (0.10, 0.15),
            edema_semi_axes: (0.14, 0.24),
            clearance_cells: 2.0,
            max_attempts: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// Centre in cells.
    pub centre: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
}

impl Ellipse {
    /// `((x/a)² + (z/b)²)` in the ellipse frame; ≤ 1 inside.
    pub fn level(&self, ix: f64, iz: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dz) = (ix - self.centre.0, iz - self.centre.1);
        let u = c * dx + s * dz;
        let v = -s * dx + c * dz;
        (u / self.semi_axes.0).powi(2) + (v / self.semi_axes.1).powi(2)
    }

    pub fn contains(&self, ix: f64, iz: f64) -> bool {
        self.level(ix, iz) <= 1.0
    }

    pub fn grown(&self, by: f64) -> Self {
        Self { centre: self.centre, semi_axes: (self.semi_axes.0 + by, self.semi_axes.1 + by), angle: self.angle }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmParams {
    pub outer: Ellipse,
    pub skin_cells: f64,
    pub fat_cells: f64,
    pub bones: Vec<Ellipse>,
    pub edema: Option<Ellipse>,
    /// Drawn SoS for skin, fat, muscle, bone, edema.
    pub sos: [f64; 5],
}

fn draw<R: Rng>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

fn fits_in_muscle(labels: &Array2<u8>, shape: &Ellipse, clearance: f64) -> bool {
    let grown = shape.grown(clearance);
    let reach = grown.semi_axes.0.max(grown.semi_axes.1).ceil() as isize + 1;
    let (nx, nz) = labels.dim();
    let (cx, cz) = (shape.centre.0.round() as isize, shape.centre.1.round() as isize);
    for ix in cx - reach..=cx + reach {
        for iz in cz - reach..=cz + reach {
            if !grown.contains(ix as f64, iz as f64) {
                continue;
            }
            if ix < 0 || iz < 0 || ix >= nx as isize || iz >= nz as isize {
                return false;
            }
            if labels[[ix as usize, iz as usize]] != MUSCLE {
                return false;
            }
        }
    }
    true
}

fn paint(labels: &mut Array2<u8>, shape: &Ellipse, label: u8) {
    for ((ix, iz), l) in labels.indexed_iter_mut() {
        if shape.contains(ix as f64, iz as f64) {
            *l = label;
        }
    }
}

/// One arm phantom; `ring_diameter` is in metres.
pub fn arm_phantom<R: Rng>(rng: &mut R, with_edema: bool, grid: &Grid2D, ring_diameter: f64, cfg: &ArmConfig) -> Result<TissueMap> {
    let radius = ring_diameter / 2.0 / grid.dx;
    let (cx, cz) = grid.centre();
    for _ in 0..cfg.max_attempts {
        let a = draw(rng, cfg.semi_major) * radius;
        let b = draw(rng, cfg.semi_minor) * radius;
        let centre = (
            cx + draw(rng, (-cfg.centre_jitter, cfg.centre_jitter)) * radius,
            cz + draw(rng, (-cfg.centre_jitter, cfg.centre_jitter)) * radius,
        );
        let outer = Ellipse { centre, semi_axes: (a, b), angle: draw(rng, (0.0, std::f64::consts::PI)) };
        let skin_cells = (draw(rng, cfg.skin) * radius).max(1.0);
        let fat_cells = (draw(rng, cfg.fat) * radius).max(1.0);
        let fat_e = outer.grown(-skin_cells);
        let muscle_e = fat_e.grown(-fat_cells);
        if muscle_e.semi_axes.0 <= 2.0 || muscle_e.semi_axes.1 <= 2.0 {
            continue;
        }
        let inside_grid = (0..grid.nx).all(|ix| !outer.contains(ix as f64, 0.0) && !outer.contains(ix as f64, (grid.nz - 1) as f64))
            && (0..grid.nz).all(|iz| !outer.contains(0.0, iz as f64) && !outer.contains((grid.nx - 1) as f64, iz as f64));
        if !inside_grid {
            continue;
        }
        let mut labels = Array2::from_elem(grid.shape(), BACKGROUND);
        paint(&mut labels, &outer, SKIN);
        paint(&mut labels, &fat_e, FAT);
        paint(&mut labels, &muscle_e, MUSCLE);

        let mut bones = Vec::new();
        for _ in 0..cfg.max_attempts {
            if bones.len() == 2 {
                break;
            }
            let r = draw(rng, cfg.bone_radius) * radius;
            let u = draw(rng, (-1.0, 1.0));
            let v = draw(rng, (-1.0, 1.0));
            let (s, c) = muscle_e.angle.sin_cos();
            let (du, dv) = (u * muscle_e.semi_axes.0, v * muscle_e.semi_axes.1);
            let bone = Ellipse {
                centre: (muscle_e.centre.0 + c * du - s * dv, muscle_e.centre.1 + s * du + c * dv),
                semi_axes: (r, r),
                angle: 0.0,
            };
            // Bones keep one clearance from the fat and from each other.
            if fits_in_muscle(&labels, &bone, 1.0) {
                paint(&mut labels, &bone, BONE);
                bones.push(bone);
            }
        }
        if bones.len() < 2 {
            continue;
        }
        let mut edema = None;
        if with_edema {
            for _ in 0..cfg.max_attempts {
                let ea = draw(rng, cfg.edema_semi_axes) * radius;
                let eb = draw(rng, cfg.edema_semi_axes) * radius;
                let u = draw(rng, (-0.8, 0.8));
                let v = draw(rng, (-0.8, 0.8));
                let (s, c) = muscle_e.angle.sin_cos();
                let (du, dv) = (u * muscle_e.semi_axes.0, v * muscle_e.semi_axes.1);
                let e = Ellipse {
                    centre: (muscle_e.centre.0 + c * du - s * dv, muscle_e.centre.1 + s * du + c * dv),
                    semi_axes: (ea, eb),
                    angle: draw(rng, (0.0, std::f64::consts::PI)),
                };
                if fits_in_muscle(&labels, &e, cfg.clearance_cells) {
                    paint(&mut labels, &e, EDEMA);
                    edema = Some(e);
                    break;
                }
            }
            if edema.is_none() {
                continue;
            }
        }
        let sos_draw = [SKIN, FAT, MUSCLE, BONE, EDEMA].map(|l| draw(rng, tissue_range(l)));
        let values = labels.mapv(|l| match l {
            BACKGROUND => WATER_SOS,
            l => sos_draw[(l - 1) as usize],
        });
        let params = ArmParams { outer, skin_cells, fat_cells, bones, edema, sos: sos_draw };
        return Ok(TissueMap { sos: SosMap::new(*grid, values)?, labels, arm: Some(params), rods: None });
    }
    Err(Error::Geometry(format!("arm phantom placement failed after {} attempts", cfg.max_attempts)))
}

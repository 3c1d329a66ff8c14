//! Rod phantoms: one to three disks of bone- or edema-like SoS in water.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arm::{BACKGROUND, BONE, EDEMA};
use super::{TissueMap, WATER_SOS};
use crate::error::{Error, Result};
use crate::grid::{Grid2D, SosMap};

pub const ROD_DIAMETER: f64 = 0.01;
pub const BONE_ROD_SOS: f64 = 2700.0;
pub const EDEMA_ROD_SOS: f64 = 1588.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RodKind {
    Bone,
    Edema,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RodSpec {
    /// Offset from the grid centre, metres (x, z).
    pub centre: (f64, f64),
    pub diameter: f64,
    pub kind: RodKind,
}

/// Disks must not overlap and must lie within the ring of `ring_diameter` m.
pub fn rod_phantom(rods: &[RodSpec], grid: &Grid2D, ring_diameter: f64) -> Result<TissueMap> {
    if rods.is_empty() || rods.len() > 3 {
        return Err(Error::InvalidArgument(format!("1 to 3 rods required, got {}", rods.len())));
    }
    for r in rods {
        if !(r.diameter > 0.0) {
            return Err(Error::InvalidArgument(format!("rod diameter must be positive, got {}", r.diameter)));
        }
        let dist = r.centre.0.hypot(r.centre.1);
        if dist + r.diameter / 2.0 > ring_diameter / 2.0 {
            return Err(Error::Geometry(format!("rod at {:?} extends outside the array", r.centre)));
        }
    }
    for (i, a) in rods.iter().enumerate() {
        for b in &rods[i + 1..] {
            let d = (a.centre.0 - b.centre.0).hypot(a.centre.1 - b.centre.1);
            if d < (a.diameter + b.diameter) / 2.0 {
                return Err(Error::Geometry(format!("rods at {:?} and {:?} overlap", a.centre, b.centre)));
            }
        }
    }
    let (cx, cz) = grid.centre();
    let mut labels = Array2::from_elem(grid.shape(), BACKGROUND);
    let mut values = Array2::from_elem(grid.shape(), WATER_SOS);
    for ((ix, iz), l) in labels.indexed_iter_mut() {
        let x = (ix as f64 - cx) * grid.dx;
        let z = (iz as f64 - cz) * grid.dx;
        for r in rods {
            if (x - r.centre.0).hypot(z - r.centre.1) <= r.diameter / 2.0 {
                let (label, sos) = match r.kind {
                    RodKind::Bone => (BONE, BONE_ROD_SOS),
                    RodKind::Edema => (EDEMA, EDEMA_ROD_SOS),
                };
                *l = label;
                values[[ix, iz]] = sos;
            }
        }
    }
    Ok(TissueMap { sos: SosMap::new(*grid, values)?, labels, arm: None, rods: Some(rods.to_vec()) })
}

/// Random non-overlapping layout of `count` rods by rejection sampling.
pub fn random_rods<R: Rng>(rng: &mut R, count: usize, diameter: f64, ring_diameter: f64, attempts: usize) -> Result<Vec<RodSpec>> {
    let reach = ring_diameter / 2.0 - diameter / 2.0;
    if reach < 0.0 {
        return Err(Error::Geometry(format!("{diameter} m rods do not fit a {ring_diameter} m array")));
    }
    for _ in 0..attempts {
        let rods: Vec<RodSpec> = (0..count)
            .map(|_| {
                let rad = reach * rng.random::<f64>().sqrt();
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                let kind = if rng.random::<bool>() { RodKind::Bone } else { RodKind::Edema };
                RodSpec { centre: (rad * ang.cos(), rad * ang.sin()), diameter, kind }
            })
            .collect();
        let separated = rods.iter().enumerate().all(|(i, a)| {
            rods[i + 1..].iter().all(|b| (a.centre.0 - b.centre.0).hypot(a.centre.1 - b.centre.1) >= diameter)
        });
        if separated {
            return Ok(rods);
        }
    }
    Err(Error::Geometry(format!("no layout of {count} rods found in {attempts} attempts")))
}

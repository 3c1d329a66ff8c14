//! Spatial/temporal discretisation, ring acquisition geometry and the
//! containers shared by the solver, the inversion and the learning code.
//!
//! Arrays are laid out `[ix, iz]` (row-major, `iz` contiguous). Flat indices
//! used by the stepping kernels are `ix * nz + iz`.

use std::f64::consts::{PI, SQRT_2};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound (exclusive) accepted for any speed-of-sound value, m/s.
pub const SOS_UPPER: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub nx: usize,
    pub nz: usize,
    /// Isotropic spacing, m.
    pub dx: f64,
    /// Time step, s.
    pub dt: f64,
    /// Number of time samples.
    pub nt: usize,
}

impl Grid2D {
    pub fn new(nx: usize, nz: usize, dx: f64, dt: f64, nt: usize) -> Result<Self> {
        if nx < 3 || nz < 3 || nt < 3 {
            return Err(Error::InvalidArgument(format!(
                "grid needs nx, nz, nt >= 3 (got {nx}x{nz}, nt={nt})"
            )));
        }
        if !(dx > 0.0 && dx.is_finite() && dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("grid needs dx, dt > 0 (got dx={dx}, dt={dt})")));
        }
        Ok(Self { nx, nz, dx, dt, nt })
    }

    /// Parses the `nx,nz,dx,dt,nt` form used on the command line.
    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(Error::InvalidArgument(format!("expected nx,nz,dx,dt,nt, got '{spec}'")));
        }
        let bad = |what: &str| Error::InvalidArgument(format!("bad {what} in grid spec '{spec}'"));
        let nx = parts[0].parse().map_err(|_| bad("nx"))?;
        let nz = parts[1].parse().map_err(|_| bad("nz"))?;
        let dx = parts[2].parse().map_err(|_| bad("dx"))?;
        let dt = parts[3].parse().map_err(|_| bad("dt"))?;
        let nt = parts[4].parse().map_err(|_| bad("nt"))?;
        Self::new(nx, nz, dx, dt, nt)
    }

    pub fn cells(&self) -> usize {
        self.nx * self.nz
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.nz)
    }

    /// Grid-coordinate centre of the domain.
    pub fn centre(&self) -> (f64, f64) {
        ((self.nx as f64 - 1.0) / 2.0, (self.nz as f64 - 1.0) / 2.0)
    }

    /// True when `(ix, iz)` lies at least `margin` cells away from every edge.
    pub fn in_interior(&self, ix: usize, iz: usize, margin: usize) -> bool {
        ix >= margin && iz >= margin && ix + margin < self.nx && iz + margin < self.nz
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CflCheck {
    /// `dt * c_max * sqrt(2) / dx`; stable iff <= 1.
    pub ratio: f64,
    pub pass: bool,
}

/// 2-D explicit second-order bound `dt <= dx / (c_max * sqrt(2))`.
pub fn check_cfl(grid: &Grid2D, c_max: f64) -> CflCheck {
    let ratio = grid.dt * c_max * SQRT_2 / grid.dx;
    CflCheck { ratio, pass: ratio <= 1.0 }
}

pub(crate) fn require_cfl(grid: &Grid2D, c_max: f64) -> Result<()> {
    let check = check_cfl(grid, c_max);
    if check.pass {
        Ok(())
    } else {
        Err(Error::Cfl { ratio: check.ratio, dt: grid.dt, dx: grid.dx, c_max })
    }
}

/// Speed-of-sound raster, m/s.
#[derive(Debug, Clone, PartialEq)]
pub struct SosMap {
    pub grid: Grid2D,
    pub values: Array2<f64>,
}

impl SosMap {
    pub fn new(grid: Grid2D, values: Array2<f64>) -> Result<Self> {
        if values.dim() != grid.shape() {
            return Err(Error::Shape(format!(
                "SoS map is {:?}, grid is {:?}",
                values.dim(),
                grid.shape()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0 && **v < SOS_UPPER)) {
            return Err(Error::InvalidArgument(format!("SoS value {bad} outside (0, {SOS_UPPER}) m/s")));
        }
        Ok(Self { grid, values })
    }

    pub fn homogeneous(grid: Grid2D, c: f64) -> Result<Self> {
        Self::new(grid, Array2::from_elem(grid.shape(), c))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Transducer ring and per-transmission receiver subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionGeometry {
    pub n_p: usize,
    pub n_r: usize,
    pub diameter: f64,
    /// Node-snapped `(ix, iz)` of every element.
    pub elements: Vec<(usize, usize)>,
    /// Element index that fires in transmission `p`.
    pub tx_elements: Vec<usize>,
    /// `rx_pattern[p]` lists the `n_r` receiving element indices of transmission `p`.
    pub rx_pattern: Vec<Vec<usize>>,
}

impl AcquisitionGeometry {
    /// Ring of `n_p` evenly spaced elements; each transmission listens on the
    /// opposite element and its `(n_r - 1) / 2` neighbours on either side.
    pub fn ring(n_p: usize, diameter: f64, n_r: usize, grid: &Grid2D, margin: usize) -> Result<Self> {
        if n_p < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 elements, got {n_p}")));
        }
        if n_r == 0 || n_r > n_p {
            return Err(Error::InvalidArgument(format!("n_r must be in [1, {n_p}], got {n_r}")));
        }
        if n_r > 1 && n_r % 2 == 0 {
            return Err(Error::UnsupportedPattern(format!(
                "n_r = {n_r} cannot be centred on the opposite element"
            )));
        }
        if !(diameter > 0.0) {
            return Err(Error::Geometry(format!("ring diameter must be positive, got {diameter}")));
        }
        let (cx, cz) = grid.centre();
        let radius = diameter / 2.0 / grid.dx;
        let mut elements = Vec::with_capacity(n_p);
        for p in 0..n_p {
            let theta = 2.0 * PI * p as f64 / n_p as f64;
            let x = (cx + radius * theta.cos()).round();
            let z = (cz + radius * theta.sin()).round();
            if x < 0.0 || z < 0.0 || !grid.in_interior(x as usize, z as usize, margin) {
                return Err(Error::Geometry(format!(
                    "element {p} at ({x}, {z}) leaves the interior of a {}x{} grid with a {margin}-cell margin",
                    grid.nx, grid.nz
                )));
            }
            elements.push((x as usize, z as usize));
        }
        let half = (n_r as isize - 1) / 2;
        let rx_pattern = (0..n_p)
            .map(|p| {
                let opposite = (p + n_p / 2) as isize;
                (-half..=half)
                    .map(|j| (opposite + j).rem_euclid(n_p as isize) as usize)
                    .collect()
            })
            .collect();
        Ok(Self { n_p, n_r, diameter, elements, tx_elements: (0..n_p).collect(), rx_pattern })
    }

    pub fn channels(&self) -> usize {
        self.transmissions() * self.n_r
    }

    /// Restricts (or reorders) the transmissions, keeping element indices and
    /// therefore all transmitter/receiver nodes unchanged.
    pub fn select_transmissions(&self, transmissions: &[usize]) -> Result<Self> {
        if transmissions.is_empty() {
            return Err(Error::InvalidArgument("empty transmission selection".into()));
        }
        let mut out = self.clone();
        out.tx_elements.clear();
        out.rx_pattern.clear();
        for &p in transmissions {
            if p >= self.transmissions() {
                return Err(Error::InvalidArgument(format!("transmission {p} out of range")));
            }
            out.tx_elements.push(self.tx_elements[p]);
            out.rx_pattern.push(self.rx_pattern[p].clone());
        }
        Ok(out)
    }

    /// Number of transmissions (equals `n_p` for a full ring).
    pub fn transmissions(&self) -> usize {
        self.tx_elements.len()
    }

    pub fn tx_node(&self, p: usize) -> (usize, usize) {
        self.elements[self.tx_elements[p]]
    }

    pub fn rx_nodes(&self, p: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rx_pattern[p].iter().map(move |&r| self.elements[r])
    }
}

/// Recorded receiver traces `[transmission, receiver, time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelData {
    pub traces: Array3<f64>,
    pub dt: f64,
}

impl ChannelData {
    pub fn new(traces: Array3<f64>, dt: f64) -> Result<Self> {
        if traces.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("channel data contains non-finite samples".into()));
        }
        Ok(Self { traces, dt })
    }

    pub fn zeros(n_p: usize, n_r: usize, nt: usize, dt: f64) -> Self {
        Self { traces: Array3::zeros((n_p, n_r, nt)), dt }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.traces.dim()
    }
}

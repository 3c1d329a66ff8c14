//! Acquisition setup file: grid, damping layer, ring and source pulse.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{build_pml, make_source_pulse, ForwardModel, PulseKind};
use crate::grid::{AcquisitionGeometry, Grid2D};

/// Nominal transducer centre frequency, Hz.
pub const CENTRE_FREQUENCY: f64 = 350e3;
/// Simulation time step, s.
pub const SIM_DT: f64 = 90.243e-9;
/// Reference water SoS for wavelength-based spacing, m/s.
pub const REFERENCE_SOS: f64 = 1500.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmlConfig {
    pub thickness: usize,
    pub attenuation: f64,
    pub exponent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingConfig {
    pub elements: usize,
    /// Metres.
    pub diameter: f64,
    pub receivers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseConfig {
    pub f_c: f64,
    pub kind: PulseKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub grid: Grid2D,
    pub pml: PmlConfig,
    pub ring: RingConfig,
    pub pulse: PulseConfig,
}

impl Default for Setup {
    fn default() -> Self {
        Self::desk()
    }
}

impl Setup {
    /// 64×64 at λ/8, 8-cell layer, 8 elements with three receivers each.
    pub fn desk() -> Self {
        let dx = REFERENCE_SOS / CENTRE_FREQUENCY / 8.0;
        Self {
            grid: Grid2D { nx: 64, nz: 64, dx, dt: SIM_DT, nt: 300 },
            pml: PmlConfig { thickness: 8, attenuation: 1e-3, exponent: 2.0 },
            ring: RingConfig { elements: 8, diameter: 44.0 * dx, receivers: 3 },
            pulse: PulseConfig { f_c: CENTRE_FREQUENCY, kind: PulseKind::GaussianDerivative },
        }
    }

    pub fn geometry(&self) -> Result<AcquisitionGeometry> {
        AcquisitionGeometry::ring(self.ring.elements, self.ring.diameter, self.ring.receivers, &self.grid, self.pml.thickness)
    }

    pub fn model(&self) -> Result<ForwardModel> {
        let grid = Grid2D::new(self.grid.nx, self.grid.nz, self.grid.dx, self.grid.dt, self.grid.nt)?;
        let damping = build_pml(&grid, self.pml.thickness, self.pml.attenuation, self.pml.exponent)?;
        let pulse = make_source_pulse(self.pulse.f_c, grid.dt, grid.nt, self.pulse.kind)?;
        ForwardModel::new(grid, self.geometry()?, damping, pulse)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

//! Explicit time-domain acoustic propagation with a damping layer.
//!
//! One step of the constant-density scheme reads
//!
//! ```text
//! U[t] = (2 - D²dt²)/(1 + D dt) · U[t-1]
//!      + (D dt - 1)/(1 + D dt)  · U[t-2]
//!      + C² dt²/(1 + D dt)      · (L * U[t-1])
//!      + S[t]
//! ```
//!
//! with `L` the 5-point Laplacian scaled by `1/dx²` and zero field outside the
//! grid. All kernels run on ghost-padded buffers of shape `(nx + 2, nz + 2)`.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{require_cfl, AcquisitionGeometry, ChannelData, Grid2D, SosMap};

/// Reference speed used to calibrate the damping strength, m/s.
pub const PML_REFERENCE_SOS: f64 = 1500.0;

/// Gaussian delay in units of its standard deviation.
const PULSE_DELAY_SIGMAS: f64 = 7.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DampingProfile {
    pub grid: Grid2D,
    pub thickness: usize,
    pub d_max: f64,
    /// Damping coefficient per cell, 1/s.
    pub values: Array2<f64>,
}

impl DampingProfile {
    pub fn none(grid: Grid2D) -> Self {
        Self { grid, thickness: 0, d_max: 0.0, values: Array2::zeros(grid.shape()) }
    }
}

/// Peak damping so that a normally incident wave crossing the layer twice is
/// attenuated by `target_attenuation`: `-ln(R) c (n + 1) / (2 L)`.
pub fn pml_peak_damping(thickness: usize, dx: f64, target_attenuation: f64, exponent: f64, c_ref: f64) -> f64 {
    if thickness == 0 {
        return 0.0;
    }
    -target_attenuation.ln() * c_ref * (exponent + 1.0) / (2.0 * thickness as f64 * dx)
}

/// Polynomial damping band of `thickness` cells on every edge; corners take
/// the larger of the two axis profiles.
pub fn build_pml(grid: &Grid2D, thickness: usize, target_attenuation: f64, exponent: f64) -> Result<DampingProfile> {
    if 2 * thickness >= grid.nx.min(grid.nz) {
        return Err(Error::Geometry(format!(
            "PML of {thickness} cells does not fit a {}x{} grid",
            grid.nx, grid.nz
        )));
    }
    if thickness > 0 && !(target_attenuation > 0.0 && target_attenuation < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target attenuation must lie in (0, 1), got {target_attenuation}"
        )));
    }
    let d_max = pml_peak_damping(thickness, grid.dx, target_attenuation, exponent, PML_REFERENCE_SOS);
    let axis = |i: usize, n: usize| -> f64 {
        let d = i.min(n - 1 - i);
        if d >= thickness {
            0.0
        } else {
            d_max * ((thickness - d) as f64 / thickness as f64).powf(exponent)
        }
    };
    let values = Array2::from_shape_fn(grid.shape(), |(ix, iz)| axis(ix, grid.nx).max(axis(iz, grid.nz)));
    Ok(DampingProfile { grid: *grid, thickness, d_max, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseKind {
    Gaussian,
    GaussianDerivative,
}

impl std::str::FromStr for PulseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(PulseKind::Gaussian),
            "dgauss" | "gaussian_derivative" => Ok(PulseKind::GaussianDerivative),
            other => Err(Error::InvalidArgument(format!("unknown pulse kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourcePulse {
    pub samples: Vec<f64>,
    pub dt: f64,
    /// Nominal centre frequency, Hz (0 for arbitrary waveforms).
    pub f_c: f64,
}

impl SourcePulse {
    pub fn from_samples(samples: Vec<f64>, dt: f64) -> Result<Self> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("source pulse contains non-finite samples".into()));
        }
        Ok(Self { samples, dt, f_c: 0.0 })
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { samples: self.samples.iter().map(|v| v * alpha).collect(), ..self.clone() }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Sample `t`, zero past the end of the waveform.
    pub fn at(&self, t: usize) -> f64 {
        self.samples.get(t).copied().unwrap_or(0.0)
    }
}

/// Standard deviation giving the derivative pulse its spectral peak at `f_c`.
pub fn pulse_sigma(f_c: f64) -> f64 {
    1.0 / (2.0 * std::f64::consts::PI * f_c)
}

pub fn make_source_pulse(f_c: f64, dt: f64, nt: usize, kind: PulseKind) -> Result<SourcePulse> {
    let sigma = pulse_sigma(f_c);
    make_source_pulse_with(f_c, sigma, PULSE_DELAY_SIGMAS * sigma, dt, nt, kind)
}

/// Gaussian (or its derivative) with explicit width and delay, peak-normalised.
pub fn make_source_pulse_with(
    f_c: f64,
    sigma: f64,
    t0: f64,
    dt: f64,
    nt: usize,
    kind: PulseKind,
) -> Result<SourcePulse> {
    if !(f_c > 0.0 && dt > 0.0) || f_c * dt >= 0.5 {
        return Err(Error::InvalidArgument(format!(
            "pulse at {f_c} Hz violates Nyquist for dt = {dt} s"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("pulse width must be positive, got {sigma}")));
    }
    let mut samples: Vec<f64> = (0..nt)
        .map(|i| {
            let tau = i as f64 * dt - t0;
            let g = (-tau * tau / (2.0 * sigma * sigma)).exp();
            match kind {
                PulseKind::Gaussian => g,
                PulseKind::GaussianDerivative => -tau / (sigma * sigma) * g,
            }
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(SourcePulse { samples, dt, f_c })
}

/// Per-cell stepping coefficients on the padded layout.
#[derive(Debug, Clone)]
pub(crate) struct Stencil {
    pub nx: usize,
    pub nz: usize,
    /// Padded row stride, `nz + 2`.
    pub stride: usize,
    /// `(2 - D²dt²)/(1 + D dt)`.
    pub a: Vec<f64>,
    /// `(D dt - 1)/(1 + D dt)`.
    pub b: Vec<f64>,
    /// `C² dt² / ((1 + D dt) dx²)`.
    pub k: Vec<f64>,
}

impl Stencil {
    pub fn new(c: &SosMap, damping: &DampingProfile) -> Result<Self> {
        let grid = c.grid;
        if damping.values.dim() != grid.shape() {
            return Err(Error::Shape("damping profile does not match the SoS grid".into()));
        }
        require_cfl(&grid, c.max())?;
        let (nx, nz) = grid.shape();
        let stride = nz + 2;
        let len = (nx + 2) * stride;
        let (mut a, mut b, mut k) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        let dt = grid.dt;
        let inv_dx2 = 1.0 / (grid.dx * grid.dx);
        for ix in 0..nx {
            for iz in 0..nz {
                let d = damping.values[[ix, iz]];
                let cc = c.values[[ix, iz]];
                let den = 1.0 + d * dt;
                let i = (ix + 1) * stride + iz + 1;
                a[i] = (2.0 - d * d * dt * dt) / den;
                b[i] = (d * dt - 1.0) / den;
                k[i] = cc * cc * dt * dt / den * inv_dx2;
            }
        }
        Ok(Self { nx, nz, stride, a, b, k })
    }

    pub fn padded_len(&self) -> usize {
        (self.nx + 2) * self.stride
    }

    pub fn index(&self, ix: usize, iz: usize) -> usize {
        (ix + 1) * self.stride + iz + 1
    }

    /// `out = a·u1 + b·u2 + k·(Δu1)` over the interior; ghosts stay zero.
    pub fn step(&self, u1: &[f64], u2: &[f64], out: &mut [f64]) {
        let s = self.stride;
        for ix in 1..=self.nx {
            let row = ix * s;
            for i in row + 1..=row + self.nz {
                let lap = u1[i - s] + u1[i + s] + u1[i - 1] + u1[i + 1] - 4.0 * u1[i];
                out[i] = self.a[i] * u1[i] + self.b[i] * u2[i] + self.k[i] * lap;
            }
        }
    }

    /// Unscaled 5-point stencil `(Σ neighbours - 4u)` at padded index `i`.
    #[inline]
    pub fn raw_laplacian(&self, u: &[f64], i: usize) -> f64 {
        let s = self.stride;
        u[i - s] + u[i + s] + u[i - 1] + u[i + 1] - 4.0 * u[i]
    }

    pub fn unpad(&self, u: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((self.nx, self.nz), |(ix, iz)| u[self.index(ix, iz)])
    }

    pub fn pad(&self, a: &Array2<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.padded_len()];
        for ((ix, iz), v) in a.indexed_iter() {
            out[self.index(ix, iz)] = *v;
        }
        out
    }
}

/// Pressure state during stepping.
#[derive(Debug, Clone, PartialEq)]
pub struct Wavefield {
    pub curr: Array2<f64>,
    pub prev: Array2<f64>,
    pub t: usize,
}

/// Single explicit update from `U[t-1]`, `U[t-2]` and the source raster `S[t]`.
pub fn step_wavefield(
    u_prev1: &Array2<f64>,
    u_prev2: &Array2<f64>,
    c: &SosMap,
    damping: &DampingProfile,
    source: &Array2<f64>,
) -> Result<Array2<f64>> {
    let shape = c.grid.shape();
    if u_prev1.dim() != shape || u_prev2.dim() != shape || source.dim() != shape {
        return Err(Error::Shape("wavefield, source and SoS shapes differ".into()));
    }
    if u_prev1.iter().chain(u_prev2.iter()).chain(source.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value entering a wavefield step".into()));
    }
    let stencil = Stencil::new(c, damping)?;
    let (u1, u2) = (stencil.pad(u_prev1), stencil.pad(u_prev2));
    let mut out = vec![0.0; stencil.padded_len()];
    stencil.step(&u1, &u2, &mut out);
    Ok(stencil.unpad(&out) + source)
}

/// Transducer ring, damping layer and source waveform: everything the forward
/// map needs besides the SoS itself.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub grid: Grid2D,
    pub geometry: AcquisitionGeometry,
    pub damping: DampingProfile,
    pub pulse: SourcePulse,
}

impl ForwardModel {
    pub fn new(grid: Grid2D, geometry: AcquisitionGeometry, damping: DampingProfile, pulse: SourcePulse) -> Result<Self> {
        if damping.grid != grid {
            return Err(Error::Shape("damping profile grid differs from the model grid".into()));
        }
        if (pulse.dt - grid.dt).abs() > 1e-9 * grid.dt {
            return Err(Error::InvalidArgument(format!(
                "pulse sampled at dt={} but grid uses dt={}",
                pulse.dt, grid.dt
            )));
        }
        for &(ix, iz) in &geometry.elements {
            if ix >= grid.nx || iz >= grid.nz {
                return Err(Error::Geometry(format!("element ({ix},{iz}) outside the grid")));
            }
        }
        Ok(Self { grid, geometry, damping, pulse })
    }

    pub fn with_pulse(&self, pulse: SourcePulse) -> Result<Self> {
        Self::new(self.grid, self.geometry.clone(), self.damping.clone(), pulse)
    }

    pub fn with_geometry(&self, geometry: AcquisitionGeometry) -> Result<Self> {
        Self::new(self.grid, geometry, self.damping.clone(), self.pulse.clone())
    }

    fn check_map(&self, c: &SosMap) -> Result<()> {
        if c.grid != self.grid {
            return Err(Error::Shape(format!(
                "SoS grid {:?} differs from model grid {:?}",
                c.grid.shape(),
                self.grid.shape()
            )));
        }
        Ok(())
    }

    /// Traces `[t, r]` of transmission `p`.
    pub fn simulate_transmission(&self, c: &SosMap, p: usize) -> Result<Array2<f64>> {
        self.run_transmission(c, p, 0).map(|(traces, _)| traces)
    }

    /// Like [`simulate_transmission`](Self::simulate_transmission), also returning
    /// `U[t]` for every `t` that is a multiple of `every` (never when 0).
    pub fn run_transmission(&self, c: &SosMap, p: usize, every: usize) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        self.check_map(c)?;
        if p >= self.geometry.transmissions() {
            return Err(Error::InvalidArgument(format!("transmission {p} out of range")));
        }
        let stencil = Stencil::new(c, &self.damping)?;
        let src = {
            let (ix, iz) = self.geometry.tx_node(p);
            stencil.index(ix, iz)
        };
        let rx: Vec<usize> = self.geometry.rx_nodes(p).map(|(ix, iz)| stencil.index(ix, iz)).collect();
        let nt = self.grid.nt;
        let mut traces = Array2::zeros((nt, rx.len()));
        let mut snapshots = Vec::new();
        let len = stencil.padded_len();
        let (mut u2, mut u1, mut u0) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        for t in 0..nt {
            stencil.step(&u1, &u2, &mut u0);
            u0[src] += self.pulse.at(t);
            for (r, &i) in rx.iter().enumerate() {
                traces[[t, r]] = u0[i];
            }
            if every > 0 && t % every == 0 {
                snapshots.push(stencil.unpad(&u0));
            }
            std::mem::swap(&mut u2, &mut u1);
            std::mem::swap(&mut u1, &mut u0);
        }
        if traces.iter().any(|v: &f64| !v.is_finite()) {
            return Err(Error::BlowUp { transmission: p });
        }
        Ok((traces, snapshots))
    }

    /// All transmissions, assembled in transmission order.
    pub fn simulate_all(&self, c: &SosMap) -> Result<ChannelData> {
        let blocks: Vec<Array2<f64>> = (0..self.geometry.transmissions())
            .into_par_iter()
            .map(|p| self.simulate_transmission(c, p))
            .collect::<Result<_>>()?;
        let nt = self.grid.nt;
        let mut traces = Array3::zeros((blocks.len(), self.geometry.n_r, nt));
        for (p, block) in blocks.iter().enumerate() {
            for r in 0..self.geometry.n_r {
                for t in 0..nt {
                    traces[[p, r, t]] = block[[t, r]];
                }
            }
        }
        ChannelData::new(traces, self.grid.dt)
    }
}

//! Data misfit and its gradient with respect to the SoS map, computed as the
//! exact discrete adjoint of the forward stepping.
//!
//! With `Φ = Σ_t |P U[t] - d[t]|²` and residual `r[t] = 2(P U[t] - d[t])`,
//! the adjoint field runs backwards from `λ[nt] = λ[nt+1] = 0`:
//!
//! ```text
//! λ[t] = Pᵀ r[t] + a·λ[t+1] + L(k·λ[t+1]) + b·λ[t+2]
//! ```
//!
//! and `∂Φ/∂C = (2k/C) · Σ_t λ[t] · (L U[t-1])`. The returned gradient points
//! towards increasing misfit.

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, Stencil};
use crate::grid::{ChannelData, Grid2D, SosMap};

/// Radius in cells around each transducer node where the gradient is zeroed.
pub const ELEMENT_MASK_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    pub grid: Grid2D,
    pub values: Array2<f64>,
}

impl GradientMap {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Array2<f64>) -> f64 {
        self.values.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }
}

/// `Σ (obs - sim)²` over every channel sample.
pub fn data_misfit(obs: &ChannelData, sim: &ChannelData) -> Result<f64> {
    if obs.shape() != sim.shape() {
        return Err(Error::Shape(format!("observed {:?} vs simulated {:?}", obs.shape(), sim.shape())));
    }
    Ok(obs.traces.iter().zip(sim.traces.iter()).map(|(o, s)| (o - s) * (o - s)).sum())
}

/// `true` where the gradient is kept: outside the damping band and more than
/// [`ELEMENT_MASK_RADIUS`] cells from every transducer.
pub fn gradient_mask(model: &ForwardModel) -> Array2<bool> {
    let grid = model.grid;
    let th = model.damping.thickness;
    let r2 = ELEMENT_MASK_RADIUS * ELEMENT_MASK_RADIUS;
    Array2::from_shape_fn(grid.shape(), |(ix, iz)| {
        if !grid.in_interior(ix, iz, th) {
            return false;
        }
        model.geometry.elements.iter().all(|&(ex, ez)| {
            let dx = ix as f64 - ex as f64;
            let dz = iz as f64 - ez as f64;
            dx * dx + dz * dz > r2
        })
    })
}

fn check_obs(model: &ForwardModel, obs: &ChannelData) -> Result<()> {
    let want = (model.geometry.transmissions(), model.geometry.n_r, model.grid.nt);
    if obs.shape() != want {
        return Err(Error::Shape(format!("observed data {:?}, model expects {want:?}", obs.shape())));
    }
    Ok(())
}

/// Forward run keeping every padded field `U[0..nt]`.
fn forward_stored(model: &ForwardModel, stencil: &Stencil, p: usize) -> Result<(Vec<f64>, Array2<f64>)> {
    let len = stencil.padded_len();
    let nt = model.grid.nt;
    let (sx, sz) = model.geometry.tx_node(p);
    let src = stencil.index(sx, sz);
    let rx: Vec<usize> = model.geometry.rx_nodes(p).map(|(ix, iz)| stencil.index(ix, iz)).collect();
    let mut fields = vec![0.0; nt * len];
    let mut traces = Array2::zeros((nt, rx.len()));
    let zero = vec![0.0; len];
    for t in 0..nt {
        let (done, rest) = fields.split_at_mut(t * len);
        let u1 = if t >= 1 { &done[(t - 1) * len..t * len] } else { &zero[..] };
        let u2 = if t >= 2 { &done[(t - 2) * len..(t - 1) * len] } else { &zero[..] };
        let out = &mut rest[..len];
        stencil.step(u1, u2, out);
        out[src] += model.pulse.at(t);
        for (r, &i) in rx.iter().enumerate() {
            traces[[t, r]] = out[i];
        }
    }
    if traces.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp { transmission: p });
    }
    Ok((fields, traces))
}

/// Backward pass driven by `residual[t, r]`; returns the unmasked gradient.
fn adjoint_pass(
    model: &ForwardModel,
    stencil: &Stencil,
    c: &SosMap,
    p: usize,
    fields: &[f64],
    residual: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let len = stencil.padded_len();
    let nt = model.grid.nt;
    let rx: Vec<usize> = model.geometry.rx_nodes(p).map(|(ix, iz)| stencil.index(ix, iz)).collect();
    let s = stencil.stride;
    let (mut l2, mut l1, mut l0) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    let mut kl = vec![0.0; len];
    let mut acc = vec![0.0; len];
    for t in (0..nt).rev() {
        for i in 0..len {
            kl[i] = stencil.k[i] * l1[i];
        }
        for ix in 1..=stencil.nx {
            let row = ix * s;
            for i in row + 1..=row + stencil.nz {
                let lap = kl[i - s] + kl[i + s] + kl[i - 1] + kl[i + 1] - 4.0 * kl[i];
                l0[i] = stencil.a[i] * l1[i] + lap + stencil.b[i] * l2[i];
            }
        }
        for (r, &i) in rx.iter().enumerate() {
            l0[i] += residual[[t, r]];
        }
        if t >= 1 {
            let u = &fields[(t - 1) * len..t * len];
            for ix in 1..=stencil.nx {
                let row = ix * s;
                for i in row + 1..=row + stencil.nz {
                    acc[i] += l0[i] * stencil.raw_laplacian(u, i);
                }
            }
        }
        std::mem::swap(&mut l2, &mut l1);
        std::mem::swap(&mut l1, &mut l0);
    }
    let mut g = stencil.unpad(&acc);
    let k = stencil.unpad(&stencil.k);
    g.zip_mut_with(&k, |gv, kv| *gv *= 2.0 * kv);
    g.zip_mut_with(&c.values, |gv, cv| *gv /= cv);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp { transmission: p });
    }
    Ok(g)
}

/// Misfit and unmasked gradient of a single transmission.
pub fn transmission_gradient(model: &ForwardModel, c: &SosMap, obs: &ChannelData, p: usize) -> Result<(f64, Array2<f64>)> {
    check_obs(model, obs)?;
    let stencil = Stencil::new(c, &model.damping)?;
    let (fields, sim) = forward_stored(model, &stencil, p)?;
    let obs_p = obs.traces.slice(s![p, .., ..]);
    let mut residual = Array2::zeros(sim.dim());
    let mut misfit = 0.0;
    for t in 0..sim.nrows() {
        for r in 0..sim.ncols() {
            let d = sim[[t, r]] - obs_p[[r, t]];
            misfit += d * d;
            residual[[t, r]] = 2.0 * d;
        }
    }
    let g = adjoint_pass(model, &stencil, c, p, &fields, residual.view())?;
    Ok((misfit, g))
}

/// Adjoint gradient for an arbitrary receiver-side source `residual[t, r]`
/// in place of `2(sim - obs)`.
pub fn residual_gradient(model: &ForwardModel, c: &SosMap, p: usize, residual: &Array2<f64>) -> Result<Array2<f64>> {
    let want = (model.grid.nt, model.geometry.n_r);
    if residual.dim() != want {
        return Err(Error::Shape(format!("residual {:?}, expected {want:?}", residual.dim())));
    }
    let stencil = Stencil::new(c, &model.damping)?;
    let (fields, _) = forward_stored(model, &stencil, p)?;
    adjoint_pass(model, &stencil, c, p, &fields, residual.view())
}

/// Total misfit and gradient over all transmissions, optionally masked.
/// Per-transmission results are summed in transmission order.
pub fn misfit_and_gradient(model: &ForwardModel, c: &SosMap, obs: &ChannelData, masked: bool) -> Result<(f64, GradientMap)> {
    check_obs(model, obs)?;
    let parts: Vec<(f64, Array2<f64>)> = (0..model.geometry.transmissions())
        .into_par_iter()
        .map(|p| transmission_gradient(model, c, obs, p))
        .collect::<Result<_>>()?;
    let mut misfit = 0.0;
    let mut values = Array2::zeros(model.grid.shape());
    for (m, g) in &parts {
        misfit += m;
        values += g;
    }
    if masked {
        let mask = gradient_mask(model);
        values.zip_mut_with(&mask, |v, keep| {
            if !keep {
                *v = 0.0
            }
        });
    }
    Ok((misfit, GradientMap { grid: model.grid, values }))
}

/// Masked adjoint-state gradient of the data misfit.
pub fn compute_gradient(model: &ForwardModel, c: &SosMap, obs: &ChannelData) -> Result<GradientMap> {
    misfit_and_gradient(model, c, obs, true).map(|(_, g)| g)
}

pub fn misfit_at(model: &ForwardModel, c: &SosMap, obs: &ChannelData) -> Result<f64> {
    data_misfit(obs, &model.simulate_all(c)?)
}

/// Central-difference derivatives of the misfit at `cells`, step `eps` m/s.
pub fn fd_gradient_oracle(
    model: &ForwardModel,
    c: &SosMap,
    obs: &ChannelData,
    cells: &[(usize, usize)],
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    cells
        .par_iter()
        .map(|&(ix, iz)| {
            if ix >= c.grid.nx || iz >= c.grid.nz {
                return Err(Error::InvalidArgument(format!("cell ({ix},{iz}) outside the grid")));
            }
            let mut plus = c.clone();
            plus.values[[ix, iz]] += eps;
            let mut minus = c.clone();
            minus.values[[ix, iz]] -= eps;
            Ok((misfit_at(model, &plus, obs)? - misfit_at(model, &minus, obs)?) / (2.0 * eps))
        })
        .collect()
}

/// Central-difference directional derivative along `direction`.
pub fn fd_directional(model: &ForwardModel, c: &SosMap, obs: &ChannelData, direction: &Array2<f64>, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let plus = SosMap::new(c.grid, &c.values + &(direction * eps))?;
    let minus = SosMap::new(c.grid, &c.values - &(direction * eps))?;
    Ok((misfit_at(model, &plus, obs)? - misfit_at(model, &minus, obs)?) / (2.0 * eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{build_pml, make_source_pulse, PulseKind};
    use crate::grid::AcquisitionGeometry;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn small_model(n: usize, pml: usize, nt: usize, n_p: usize) -> ForwardModel {
        let dx = 1500.0 / 350e3 / 8.0;
        let grid = Grid2D::new(n, n, dx, 90.243e-9, nt).unwrap();
        let diameter = (n - 2 * pml - 3) as f64 * dx;
        let n_r = if n_p >= 4 { 3 } else { 1 };
        let geom = AcquisitionGeometry::ring(n_p, diameter, n_r, &grid, pml).unwrap();
        let damping = build_pml(&grid, pml, 1e-3, 2.0).unwrap();
        let pulse = make_source_pulse(350e3, grid.dt, nt, PulseKind::GaussianDerivative).unwrap();
        ForwardModel::new(grid, geom, damping, pulse).unwrap()
    }

    fn blob(grid: Grid2D, amp: f64) -> SosMap {
        let (cx, cz) = grid.centre();
        let v = Array2::from_shape_fn(grid.shape(), |(ix, iz)| {
            let r2 = (ix as f64 - cx).powi(2) + (iz as f64 - cz).powi(2);
            1500.0 + amp * (-r2 / 6.0).exp()
        });
        SosMap::new(grid, v).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn misfit_examples() {
        let a = ChannelData::new(Array3::ones((2, 1, 3)), 1e-7).unwrap();
        let z = ChannelData::zeros(2, 1, 3, 1e-7);
        assert_eq!(data_misfit(&a, &a).unwrap(), 0.0);
        assert_eq!(data_misfit(&a, &z).unwrap(), 6.0);
        assert!(data_misfit(&a, &ChannelData::zeros(2, 1, 4, 1e-7)).is_err());

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Array3::from_shape_fn((4, 2, 50), |_| rng.random::<f64>() - 0.5);
        let y = Array3::from_shape_fn((4, 2, 50), |_| rng.random::<f64>() - 0.5);
        let mut want = 0.0;
        for p in 0..4 {
            for r in 0..2 {
                for t in 0..50 {
                    want += (x[[p, r, t]] - y[[p, r, t]]).powi(2);
                }
            }
        }
        let got = data_misfit(&ChannelData::new(x, 1e-7).unwrap(), &ChannelData::new(y, 1e-7).unwrap()).unwrap();
        assert!(rel(got, want) < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let model = small_model(16, 2, 100, 2);
        let obs = model.simulate_all(&blob(model.grid, 40.0)).unwrap();
        let c = SosMap::homogeneous(model.grid, 1500.0).unwrap();
        let (_, g) = misfit_and_gradient(&model, &c, &obs, false).unwrap();
        let cells: Vec<(usize, usize)> = vec![(5, 5), (7, 8), (8, 8), (10, 6), (3, 12), (12, 12)];
        let fd = fd_gradient_oracle(&model, &c, &obs, &cells, 1e-3).unwrap();
        for (&(ix, iz), d) in cells.iter().zip(&fd) {
            let e = rel(g.values[[ix, iz]], *d);
            assert!(e < 1e-4, "cell ({ix},{iz}): adjoint {} fd {d} rel {e}", g.values[[ix, iz]]);
        }
    }

    #[test]
    fn directional_derivative_matches_with_damping() {
        let model = small_model(20, 3, 120, 4);
        let obs = model.simulate_all(&blob(model.grid, -30.0)).unwrap();
        let c = SosMap::homogeneous(model.grid, 1510.0).unwrap();
        let g = compute_gradient(&model, &c, &obs).unwrap();
        let mask = gradient_mask(&model);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let delta = Array2::from_shape_fn(model.grid.shape(), |ix| {
                if mask[ix] {
                    rng.random::<f64>() - 0.5
                } else {
                    0.0
                }
            });
            let fd = fd_directional(&model, &c, &obs, &delta, 1e-3).unwrap();
            assert!(rel(g.dot(&delta), fd) < 1e-4, "{} vs {fd}", g.dot(&delta));
        }
    }

    #[test]
    fn mask_zeroes_band_and_element_neighbourhoods() {
        let model = small_model(24, 4, 50, 4);
        let obs = model.simulate_all(&blob(model.grid, 30.0)).unwrap();
        let g = compute_gradient(&model, &SosMap::homogeneous(model.grid, 1500.0).unwrap(), &obs).unwrap();
        for ix in 0..24 {
            for iz in 0..24 {
                if !model.grid.in_interior(ix, iz, 4) {
                    assert_eq!(g.values[[ix, iz]], 0.0);
                }
            }
        }
        for &(ex, ez) in &model.geometry.elements {
            assert_eq!(g.values[[ex, ez]], 0.0);
            assert_eq!(g.values[[ex + 1, ez + 1]], 0.0);
        }
        assert!(g.max_abs() > 0.0);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let model = small_model(20, 3, 100, 4);
        let truth = blob(model.grid, 50.0);
        let obs = model.simulate_all(&truth).unwrap();
        let (m, g) = misfit_and_gradient(&model, &truth, &obs, true).unwrap();
        assert_eq!(m, 0.0);
        let shifted = SosMap::new(model.grid, &truth.values + 1.0).unwrap();
        let scale = compute_gradient(&model, &shifted, &obs).unwrap().max_abs();
        assert!(scale > 0.0);
        assert!(g.max_abs() <= 1e-8 * scale);
        let fd = fd_gradient_oracle(&model, &truth, &obs, &[(9, 9), (6, 11)], 1e-3).unwrap();
        assert!(fd.iter().all(|d| d.abs() <= 1e-6 * scale));
    }

    #[test]
    fn gradient_is_linear_in_residual() {
        let model = small_model(16, 2, 80, 2);
        let c = blob(model.grid, 20.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let r = Array2::from_shape_fn((80, 1), |_| rng.random::<f64>() - 0.5);
        let g1 = residual_gradient(&model, &c, 0, &r).unwrap();
        let alpha = -2.75;
        let g2 = residual_gradient(&model, &c, 0, &(&r * alpha)).unwrap();
        let scale = g1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((alpha * a - b).abs() <= 1e-10 * scale * alpha.abs());
        }
    }

    #[test]
    fn gradient_is_additive_over_transmissions() {
        let model = small_model(20, 3, 90, 4);
        let obs = model.simulate_all(&blob(model.grid, 40.0)).unwrap();
        let c = SosMap::homogeneous(model.grid, 1500.0).unwrap();
        let (total_m, total) = misfit_and_gradient(&model, &c, &obs, false).unwrap();
        let mut sum = Array2::zeros(model.grid.shape());
        let mut sum_m = 0.0;
        for p in 0..4 {
            let (m, g) = transmission_gradient(&model, &c, &obs, p).unwrap();
            sum_m += m;
            sum += &g;
        }
        assert_eq!(sum_m, total_m);
        assert_eq!(sum, total.values);
    }

    #[test]
    fn central_difference_error_is_second_order() {
        let model = small_model(16, 2, 100, 2);
        let obs = model.simulate_all(&blob(model.grid, 40.0)).unwrap();
        let c = SosMap::homogeneous(model.grid, 1500.0).unwrap();
        let cell = [(8, 7)];
        let reference = fd_gradient_oracle(&model, &c, &obs, &cell, 1e-3).unwrap()[0];
        let coarse = fd_gradient_oracle(&model, &c, &obs, &cell, 20.0).unwrap()[0];
        let fine = fd_gradient_oracle(&model, &c, &obs, &cell, 10.0).unwrap()[0];
        let ratio = (coarse - reference).abs() / (fine - reference).abs();
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn oracle_rejects_non_positive_step() {
        let model = small_model(16, 2, 20, 2);
        let c = SosMap::homogeneous(model.grid, 1500.0).unwrap();
        let obs = model.simulate_all(&c).unwrap();
        assert!(fd_gradient_oracle(&model, &c, &obs, &[(8, 8)], 0.0).is_err());
    }
}

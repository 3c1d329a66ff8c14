//! Classical full-waveform inversion: ADMM splitting with an anisotropic TV
//! prior, L-BFGS on the data-fidelity subproblem, and a plain gradient
//! descent reference.
//!
//! Scaled-form ADMM for `min ‖M - F(C)‖² + λ TV(Z)` subject to `C = Z`:
//!
//! ```text
//! C ← argmin ‖M - F(C)‖² + ρ/2 ‖C - Z + W‖²     (inner L-BFGS, box-projected)
//! Z ← prox_{(λ/ρ) TV}(C + W)
//! W ← W + C - Z
//! ```

use std::collections::VecDeque;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::adjoint::{misfit_and_gradient, misfit_at};
use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::grid::{ChannelData, SosMap};

/// Default SoS box, m/s.
pub const DEFAULT_BOUNDS: (f64, f64) = (1300.0, 3200.0);

/// Dual iterations of the TV proximal operator.
pub const TV_PROX_ITERS: usize = 20;

/// When `λ` is not given it defaults to `ρ` times this TV prox weight, m/s.
pub const DEFAULT_TV_WEIGHT: f64 = 1.0;

const LBFGS_HISTORY: usize = 5;

/// Anisotropic total variation `Σ |∂x| + |∂z|` with forward differences.
pub fn total_variation(x: &Array2<f64>) -> f64 {
    let (nx, nz) = x.dim();
    let mut tv = 0.0;
    for i in 0..nx {
        for j in 0..nz {
            if i + 1 < nx {
                tv += (x[[i + 1, j]] - x[[i, j]]).abs();
            }
            if j + 1 < nz {
                tv += (x[[i, j + 1]] - x[[i, j]]).abs();
            }
        }
    }
    tv
}

/// Approximate `argmin_x ½‖x - v‖² + weight · TV(x)` by projected gradient on
/// the dual, [`TV_PROX_ITERS`] iterations.
pub fn tv_prox(v: &Array2<f64>, weight: f64) -> Array2<f64> {
    tv_prox_iters(v, weight, TV_PROX_ITERS)
}

pub fn tv_prox_iters(v: &Array2<f64>, weight: f64, iters: usize) -> Array2<f64> {
    if weight <= 0.0 {
        return v.clone();
    }
    let (nx, nz) = v.dim();
    // Dual variables on the horizontal and vertical forward differences.
    let mut px = Array2::<f64>::zeros((nx, nz));
    let mut pz = Array2::<f64>::zeros((nx, nz));
    let primal = |px: &Array2<f64>, pz: &Array2<f64>| -> Array2<f64> {
        // x = v - w Dᵀp, with Dᵀ the negative backward divergence.
        Array2::from_shape_fn((nx, nz), |(i, j)| {
            let mut div = 0.0;
            if i + 1 < nx {
                div += px[[i, j]];
            }
            if i > 0 {
                div -= px[[i - 1, j]];
            }
            if j + 1 < nz {
                div += pz[[i, j]];
            }
            if j > 0 {
                div -= pz[[i, j - 1]];
            }
            v[[i, j]] + weight * div
        })
    };
    let tau = 1.0 / (8.0 * weight);
    for _ in 0..iters {
        let x = primal(&px, &pz);
        for i in 0..nx {
            for j in 0..nz {
                if i + 1 < nx {
                    px[[i, j]] = (px[[i, j]] + tau * (x[[i + 1, j]] - x[[i, j]])).clamp(-1.0, 1.0);
                }
                if j + 1 < nz {
                    pz[[i, j]] = (pz[[i, j]] + tau * (x[[i, j + 1]] - x[[i, j]])).clamp(-1.0, 1.0);
                }
            }
        }
    }
    primal(&px, &pz)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FwiConfig {
    pub outer_iters: usize,
    pub inner_lbfgs_iters: usize,
    pub inner_lr: f64,
    /// TV weight; `None` gives `ρ · DEFAULT_TV_WEIGHT`.
    pub lambda: Option<f64>,
    /// ADMM penalty; `None` gives `1e-2 · Φ(C0) / ‖C0‖²`.
    pub rho: Option<f64>,
    pub bounds: (f64, f64),
}

impl Default for FwiConfig {
    fn default() -> Self {
        Self { outer_iters: 200, inner_lbfgs_iters: 5, inner_lr: 1.0, lambda: None, rho: None, bounds: DEFAULT_BOUNDS }
    }
}

impl FwiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 {
            return Err(Error::InvalidArgument("outer_iters must be >= 1".into()));
        }
        if !(self.bounds.0 < self.bounds.1 && self.bounds.0 > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid SoS bounds {:?}", self.bounds)));
        }
        if self.lambda.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::InvalidArgument("lambda must be >= 0".into()));
        }
        if self.rho.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::InvalidArgument("rho must be > 0".into()));
        }
        Ok(())
    }
}

pub fn clamp_values(c: &Array2<f64>, bounds: (f64, f64)) -> Array2<f64> {
    c.mapv(|v| v.clamp(bounds.0, bounds.1))
}

/// Limited-memory BFGS state with fixed step length and no line search.
#[derive(Debug, Clone, Default)]
pub struct Lbfgs {
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    steps: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Lbfgs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn history_len(&self) -> usize {
        self.s.len()
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        // Curvature pairs with non-positive sᵀy would break positive definiteness.
        if dot(&s, &y) > 1e-10 {
            if self.s.len() == LBFGS_HISTORY {
                self.s.pop_front();
                self.y.pop_front();
            }
            self.s.push_back(s);
            self.y.push_back(y);
        }
    }

    /// Two-loop recursion: `-H g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
        let m = self.s.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            let rho = 1.0 / dot(&self.y[i], &self.s[i]);
            alpha[i] = rho * dot(&self.s[i], &q);
            q.iter_mut().zip(&self.y[i]).for_each(|(qv, yv)| *qv -= alpha[i] * yv);
        }
        if let (Some(s), Some(y)) = (self.s.back(), self.y.back()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..m {
            let rho = 1.0 / dot(&self.y[i], &self.s[i]);
            let beta = rho * dot(&self.y[i], &q);
            q.iter_mut().zip(&self.s[i]).for_each(|(qv, sv)| *qv += (alpha[i] - beta) * sv);
        }
        q
    }

    /// Runs `iters` steps on `objective` from `x`, projecting each iterate.
    /// The very first step of a fresh state is scaled by `min(1, 1/‖g‖₁)`.
    /// Returns the objective value at the start of every step.
    pub fn minimize<F, P>(&mut self, x: &mut Vec<f64>, iters: usize, lr: f64, mut objective: F, project: P) -> Result<Vec<f64>>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
        P: Fn(&mut [f64]),
    {
        let mut values = Vec::with_capacity(iters);
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        for it in 0..iters {
            let (f, g) = objective(x)?;
            if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { iteration: it, detail: format!("objective {f}") });
            }
            values.push(f);
            if let Some((px, pg)) = prev.take() {
                let s: Vec<f64> = x.iter().zip(&px).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g.iter().zip(&pg).map(|(a, b)| a - b).collect();
                self.push(s, y);
            }
            let d = self.direction(&g);
            let t = if self.steps == 0 {
                let g1: f64 = g.iter().map(|v| v.abs()).sum();
                if g1 > 0.0 {
                    (1.0 / g1).min(1.0) * lr
                } else {
                    lr
                }
            } else {
                lr
            };
            let old = x.clone();
            x.iter_mut().zip(&d).for_each(|(xv, dv)| *xv += t * dv);
            project(x);
            self.steps += 1;
            prev = Some((old, g));
        }
        Ok(values)
    }
}

#[derive(Debug, Clone)]
pub struct FwiResult {
    pub sos: SosMap,
    /// Data misfit at `C0` followed by the value after each outer iteration.
    pub misfit_log: Vec<f64>,
    pub rho: f64,
    pub lambda: f64,
}

/// ADMM-TV full-waveform inversion, exactly `cfg.outer_iters` iterations.
pub fn admm_fwi(model: &ForwardModel, obs: &ChannelData, c0: &SosMap, cfg: &FwiConfig) -> Result<FwiResult> {
    cfg.validate()?;
    crate::grid::require_cfl(&model.grid, cfg.bounds.1)?;
    let grid = c0.grid;
    let shape = grid.shape();
    let mut c = clamp_values(&c0.values, cfg.bounds);
    let initial = misfit_at(model, &SosMap::new(grid, c.clone())?, obs)?;
    let norm2: f64 = c.iter().map(|v| v * v).sum();
    let rho = cfg.rho.unwrap_or(1e-2 * initial / norm2.max(f64::MIN_POSITIVE)).max(f64::MIN_POSITIVE);
    let lambda = cfg.lambda.unwrap_or(rho * DEFAULT_TV_WEIGHT);
    let mut z = c.clone();
    let mut w = Array2::<f64>::zeros(shape);
    let mut lbfgs = Lbfgs::new();
    let mut log = vec![initial];
    let bounds = cfg.bounds;
    for outer in 0..cfg.outer_iters {
        let target = &z - &w;
        let mut x: Vec<f64> = c.iter().copied().collect();
        let objective = |xs: &[f64]| -> Result<(f64, Vec<f64>)> {
            let cm = SosMap::new(grid, Array2::from_shape_vec(shape, xs.to_vec()).expect("shape"))?;
            let (m, g) = misfit_and_gradient(model, &cm, obs, true)?;
            let mut pen = 0.0;
            let mut grad: Vec<f64> = g.values.iter().copied().collect();
            for ((gv, xv), tv) in grad.iter_mut().zip(xs).zip(target.iter()) {
                let d = xv - tv;
                pen += d * d;
                *gv += rho * d;
            }
            Ok((m + 0.5 * rho * pen, grad))
        };
        let project = |xs: &mut [f64]| xs.iter_mut().for_each(|v| *v = v.clamp(bounds.0, bounds.1));
        lbfgs
            .minimize(&mut x, cfg.inner_lbfgs_iters, cfg.inner_lr, objective, project)
            .map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { iteration: outer, detail },
                Error::BlowUp { transmission } => {
                    Error::Divergence { iteration: outer, detail: format!("blow-up in transmission {transmission}") }
                }
                other => other,
            })?;
        c = Array2::from_shape_vec(shape, x).expect("shape");
        z = tv_prox(&(&c + &w), lambda / rho);
        Zip::from(&mut w).and(&c).and(&z).for_each(|wv, cv, zv| *wv += cv - zv);
        let m = misfit_at(model, &SosMap::new(grid, c.clone())?, obs)?;
        if !m.is_finite() {
            return Err(Error::Divergence { iteration: outer, detail: "misfit is not finite".into() });
        }
        log.push(m);
    }
    Ok(FwiResult { sos: SosMap::new(grid, c)?, misfit_log: log, rho, lambda })
}

/// `C ← clamp(C - γ g)` for `steps` iterations on the masked gradient.
pub fn plain_gradient_descent(
    model: &ForwardModel,
    obs: &ChannelData,
    c0: &SosMap,
    steps: usize,
    gamma: f64,
    bounds: (f64, f64),
) -> Result<(SosMap, Vec<f64>)> {
    let mut c = c0.clone();
    let mut log = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (m, g) = misfit_and_gradient(model, &c, obs, true)?;
        if g.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        log.push(m);
        let next = Zip::from(&c.values).and(&g.values).map_collect(|cv, gv| (cv - gamma * gv).clamp(bounds.0, bounds.1));
        c = SosMap::new(c.grid, next)?;
    }
    log.push(misfit_at(model, &c, obs)?);
    Ok((c, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{build_pml, make_source_pulse, PulseKind};
    use crate::grid::{AcquisitionGeometry, Grid2D};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Exact 1-D TV prox by enumerating difference sign patterns.
    fn prox_1d_oracle(v: &[f64], w: f64) -> Vec<f64> {
        let n = v.len();
        let objective = |x: &[f64]| -> f64 {
            let fit: f64 = x.iter().zip(v).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum();
            fit + w * x.windows(2).map(|p| (p[1] - p[0]).abs()).sum::<f64>()
        };
        let mut best = v.to_vec();
        let mut best_f = objective(v);
        for code in 0..3usize.pow(n as u32 - 1) {
            let mut signs = vec![0i32; n - 1];
            let mut c = code;
            for s in signs.iter_mut() {
                *s = (c % 3) as i32 - 1;
                c /= 3;
            }
            let mut x = vec![0.0; n];
            let mut start = 0;
            while start < n {
                let mut end = start;
                while end + 1 < n && signs[end] == 0 {
                    end += 1;
                }
                let len = (end - start + 1) as f64;
                let mean = v[start..=end].iter().sum::<f64>() / len;
                let s_left = if start > 0 { signs[start - 1] as f64 } else { 0.0 };
                let s_right = if end + 1 < n { signs[end] as f64 } else { 0.0 };
                let value = mean - w * (s_left - s_right) / len;
                x[start..=end].iter_mut().for_each(|e| *e = value);
                start = end + 1;
            }
            let f = objective(&x);
            if f < best_f {
                best_f = f;
                best = x;
            }
        }
        best
    }

    fn embed(row: &[f64], rows: usize) -> Array2<f64> {
        Array2::from_shape_fn((row.len(), rows), |(i, _)| row[i])
    }

    #[test]
    fn zero_weight_and_constant_are_fixed() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let v = Array2::from_shape_fn((7, 5), |_| rng.random::<f64>());
        assert_eq!(tv_prox(&v, 0.0), v);
        let c = Array2::from_elem((6, 6), 1540.0);
        let out = tv_prox(&c, 25.0);
        assert!(out.iter().all(|x| (x - 1540.0).abs() < 1e-12));
    }

    #[test]
    fn step_signal_matches_exhaustive_oracle() {
        let step = [0.0, 0.1, -0.05, 0.0, 1.0, 1.05, 0.95, 1.0];
        let w = 0.08;
        let oracle = prox_1d_oracle(&step, w);
        let v = embed(&step, 5);
        let converged = tv_prox_iters(&v, w, 3000);
        for i in 0..8 {
            for j in 0..5 {
                assert!((converged[[i, j]] - oracle[i]).abs() < 1e-6, "{i}: {} vs {}", converged[[i, j]], oracle[i]);
            }
        }
        let fixed = tv_prox(&v, w);
        assert!(total_variation(&fixed) < total_variation(&v));
        for i in 0..8 {
            assert!((fixed[[i, 2]] - oracle[i]).abs() < 0.05, "{i}: {} vs {}", fixed[[i, 2]], oracle[i]);
        }
    }

    #[test]
    fn random_signals_match_oracle_when_converged() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let row: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 2.0).collect();
            let w = rng.random::<f64>() * 0.3;
            let oracle = prox_1d_oracle(&row, w);
            let out = tv_prox_iters(&embed(&row, 3), w, 5000);
            for i in 0..8 {
                assert!((out[[i, 1]] - oracle[i]).abs() < 1e-5);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn prox_is_nonexpansive(seed in any::<u64>(), w in 0.0f64..2.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>() * 4.0);
            let b = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>() * 4.0);
            let pa = tv_prox(&a, w);
            let pb = tv_prox(&b, w);
            let out: f64 = (&pa - &pb).iter().map(|v| v * v).sum::<f64>().sqrt();
            let inp: f64 = (&a - &b).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(out <= inp * (1.0 + 1e-3));
        }
    }

    #[test]
    fn lbfgs_solves_a_quadratic() {
        // f = ½ Σ d_i (x_i - 1)², minimum at all-ones.
        let diag = [1.0, 2.0, 5.0, 0.5];
        let mut x = vec![0.0; 4];
        let mut opt = Lbfgs::new();
        let f = |xs: &[f64]| -> Result<(f64, Vec<f64>)> {
            let g: Vec<f64> = xs.iter().zip(&diag).map(|(x, d)| d * (x - 1.0)).collect();
            let v = xs.iter().zip(&diag).map(|(x, d)| 0.5 * d * (x - 1.0).powi(2)).sum();
            Ok((v, g))
        };
        let values = opt.minimize(&mut x, 40, 1.0, f, |_| {}).unwrap();
        assert!(values.last().unwrap() < &1e-12);
        assert!(opt.history_len() <= 5);
        assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn lbfgs_reports_divergence() {
        let mut x = vec![0.0; 2];
        let err = Lbfgs::new().minimize(&mut x, 3, 1.0, |_| Ok((f64::NAN, vec![0.0; 2])), |_| {}).unwrap_err();
        assert!(matches!(err, Error::Divergence { iteration: 0, .. }));
    }

    fn model(n: usize, pml: usize, nt: usize, n_p: usize) -> ForwardModel {
        let dx = 1500.0 / 350e3 / 8.0;
        let grid = Grid2D::new(n, n, dx, 90.243e-9, nt).unwrap();
        let diameter = (n - 2 * pml - 3) as f64 * dx;
        let geom = AcquisitionGeometry::ring(n_p, diameter, if n_p >= 4 { 3 } else { 1 }, &grid, pml).unwrap();
        let damping = build_pml(&grid, pml, 1e-3, 2.0).unwrap();
        let pulse = make_source_pulse(350e3, grid.dt, nt, PulseKind::GaussianDerivative).unwrap();
        ForwardModel::new(grid, geom, damping, pulse).unwrap()
    }

    fn inclusion(grid: Grid2D, amp: f64) -> SosMap {
        let (cx, cz) = grid.centre();
        SosMap::new(
            grid,
            Array2::from_shape_fn(grid.shape(), |(i, j)| {
                let r2 = (i as f64 - cx).powi(2) + (j as f64 - cz).powi(2);
                1500.0 + amp * (-r2 / 8.0).exp()
            }),
        )
        .unwrap()
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let m = model(20, 3, 120, 4);
        let truth = inclusion(m.grid, 40.0);
        let obs = m.simulate_all(&truth).unwrap();
        let cfg = FwiConfig { outer_iters: 3, ..Default::default() };
        let out = admm_fwi(&m, &obs, &truth, &cfg).unwrap();
        assert!(out.misfit_log.last().unwrap() <= &out.misfit_log[0]);
        let dev = (&out.sos.values - &truth.values).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(dev < 1e-6, "{dev}");
    }

    #[test]
    fn zero_lambda_reduces_to_lbfgs() {
        let m = model(20, 3, 120, 4);
        let obs = m.simulate_all(&inclusion(m.grid, 60.0)).unwrap();
        let c0 = SosMap::homogeneous(m.grid, 1500.0).unwrap();
        let cfg = FwiConfig { outer_iters: 1, lambda: Some(0.0), rho: Some(1e-30), ..Default::default() };
        let admm = admm_fwi(&m, &obs, &c0, &cfg).unwrap();
        let mut x: Vec<f64> = c0.values.iter().copied().collect();
        let shape = m.grid.shape();
        Lbfgs::new()
            .minimize(
                &mut x,
                5,
                1.0,
                |xs| {
                    let c = SosMap::new(m.grid, Array2::from_shape_vec(shape, xs.to_vec()).unwrap())?;
                    let (f, g) = misfit_and_gradient(&m, &c, &obs, true)?;
                    Ok((f, g.values.iter().copied().collect()))
                },
                |xs| xs.iter_mut().for_each(|v| *v = v.clamp(DEFAULT_BOUNDS.0, DEFAULT_BOUNDS.1)),
            )
            .unwrap();
        for (a, b) in admm.sos.values.iter().zip(&x) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn admm_reduces_misfit_and_respects_bounds() {
        let m = model(24, 4, 160, 4);
        let obs = m.simulate_all(&inclusion(m.grid, 50.0)).unwrap();
        let c0 = SosMap::homogeneous(m.grid, 1500.0).unwrap();
        let cfg = FwiConfig { outer_iters: 6, bounds: (1450.0, 1560.0), ..Default::default() };
        let out = admm_fwi(&m, &obs, &c0, &cfg).unwrap();
        assert_eq!(out.misfit_log.len(), 7);
        assert!(out.misfit_log.iter().all(|v| v.is_finite() && *v > 0.0));
        assert!(out.misfit_log.last().unwrap() < &out.misfit_log[0]);
        assert!(out.sos.values.iter().all(|v| (1450.0..=1560.0).contains(v)));
    }

    #[test]
    fn gradient_descent_examples() {
        let m = model(16, 2, 100, 2);
        let truth = inclusion(m.grid, 40.0);
        let obs = m.simulate_all(&truth).unwrap();
        let c0 = SosMap::homogeneous(m.grid, 1500.0).unwrap();
        let (same, _) = plain_gradient_descent(&m, &obs, &c0, 3, 0.0, DEFAULT_BOUNDS).unwrap();
        assert_eq!(same.values, c0.values);
        let (fixed, _) = plain_gradient_descent(&m, &obs, &truth, 1, 1e6, DEFAULT_BOUNDS).unwrap();
        let dev = (&fixed.values - &truth.values).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(dev < 1e-8);

        // Step chosen from the gradient scale: one tenth of a 1 m/s peak move.
        let g = crate::adjoint::compute_gradient(&m, &c0, &obs).unwrap();
        let gamma = 0.1 / g.max_abs();
        let (_, log) = plain_gradient_descent(&m, &obs, &c0, 5, gamma, DEFAULT_BOUNDS).unwrap();
        for pair in log.windows(2) {
            assert!(pair[1] < pair[0], "{log:?}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(FwiConfig { outer_iters: 0, ..Default::default() }.validate().is_err());
        assert!(FwiConfig { bounds: (2000.0, 1500.0), ..Default::default() }.validate().is_err());
        assert!(FwiConfig { rho: Some(0.0), ..Default::default() }.validate().is_err());
        assert!(FwiConfig::default().validate().is_ok());
    }
}

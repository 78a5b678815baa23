//! TV-regularized inverse retrieval by ADMM with projected FISTA primal steps.
//!
//! Minimizes
//!
//! ```text
//! C(τ) = ‖A τ − τ_LR‖² + γ ‖τ − τ_LP‖² + β Σ w (τ − τ_GP)² + α ‖D τ‖₁,   τ ≥ 0
//! ```
//!
//! with the splitting `z = D τ` and an unscaled dual variable `y`.

pub mod tv;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{bilinear_array, decimate_adjoint_array, decimate_array};
use crate::types::{Plane, Role, SamplingMap};
pub use tv::{shrink, tv_adjoint, tv_forward, GradientField};

/// Fraction of the median nonzero initial gradient used as the default α.
pub const ALPHA_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    /// TV weight. `None` picks `0.01 · median(|D τ₀|)` over nonzero entries.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub rho: f64,
    pub admm_iters: usize,
    pub fista_iters: usize,
    /// Overrides the `1 / L` step.
    pub fista_step: Option<f64>,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            alpha: None,
            beta: 0.5,
            gamma: 1.0,
            rho: 1.0,
            admm_iters: 20,
            fista_iters: 90,
            fista_step: None,
        }
    }
}

impl ReconstructionConfig {
    /// Defaults with β chosen for the upsampling factor: 0.02 up to 4x, 0.5 above.
    pub fn for_factor(factor: usize) -> Self {
        ReconstructionConfig {
            beta: default_beta(factor),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [("beta", self.beta), ("gamma", self.gamma)];
        for (name, w) in weights.into_iter().chain(self.alpha.map(|a| ("alpha", a))) {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be >= 0, got {w}"
                )));
            }
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "rho must be > 0, got {}",
                self.rho
            )));
        }
        if self.admm_iters == 0 || self.fista_iters == 0 {
            return Err(Error::InvalidConfig("iteration counts must be >= 1".into()));
        }
        if let Some(s) = self.fista_step {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "fista_step must be > 0, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// Lipschitz bound of the primal gradient, using `‖D‖² ≤ 8`.
    pub fn lipschitz(&self) -> f64 {
        2.0 + 2.0 * self.gamma + 2.0 * self.beta + 8.0 * self.rho
    }
}

/// β default for an upsampling factor.
pub fn default_beta(factor: usize) -> f64 {
    if factor <= 4 {
        0.02
    } else {
        0.5
    }
}

/// The smooth part of the cost: data fidelity and the two prior terms.
#[derive(Debug, Clone)]
pub struct Problem {
    map: SamplingMap,
    lr: Array2<f64>,
    lr_mask: Array2<f64>,
    lp: Option<Array2<f64>>,
    gp: Option<Array2<f64>>,
    gp_weight: Array2<f64>,
    gamma: f64,
    beta: f64,
}

impl Problem {
    /// Missing priors contribute nothing. Unsampled (`NaN`) LR entries are
    /// dropped from the data term.
    pub fn new(
        lr_tau: &Plane,
        lp: Option<&Plane>,
        gp: Option<&Plane>,
        gp_weight: Option<&Plane>,
        map: &SamplingMap,
        cfg: &ReconstructionConfig,
    ) -> Result<Self> {
        let hr = map.hr_shape();
        let check = |p: &Plane| -> Result<()> {
            if p.shape() != hr {
                return Err(Error::shape(&[hr.0, hr.1], &[p.shape().0, p.shape().1]));
            }
            if p.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("prior planes must be finite".into()));
            }
            Ok(())
        };
        if lr_tau.shape() != map.lr_shape() {
            let (m, n) = map.lr_shape();
            return Err(Error::shape(&[m, n], &[lr_tau.shape().0, lr_tau.shape().1]));
        }
        for p in [lp, gp, gp_weight].into_iter().flatten() {
            check(p)?;
        }
        if gp_weight.is_some() && gp.is_none() {
            return Err(Error::InvalidValue(
                "gp weight given without a gp prior".into(),
            ));
        }
        let lr_mask = lr_tau.values().mapv(|v| if v.is_nan() { 0.0 } else { 1.0 });
        if lr_mask.sum() == 0.0 {
            return Err(Error::NoUsableSamples);
        }
        let lr = lr_tau.values().mapv(|v| if v.is_nan() { 0.0 } else { v });
        let gp_weight = match (gp, gp_weight) {
            (Some(_), Some(w)) => w.values().clone(),
            (Some(_), None) => Array2::ones(hr),
            _ => Array2::zeros(hr),
        };
        Ok(Problem {
            map: map.clone(),
            lr,
            lr_mask,
            lp: lp.map(|p| p.values().clone()),
            gp: gp.map(|p| p.values().clone()),
            gp_weight,
            gamma: if lp.is_some() { cfg.gamma } else { 0.0 },
            beta: if gp.is_some() { cfg.beta } else { 0.0 },
        })
    }

    pub fn map(&self) -> &SamplingMap {
        &self.map
    }

    fn residual(&self, tau: &Array2<f64>) -> Array2<f64> {
        let mut r = decimate_array(tau, &self.map).expect("shape checked");
        Zip::from(&mut r)
            .and(&self.lr)
            .and(&self.lr_mask)
            .for_each(|r, &b, &m| *r = m * (*r - b));
        r
    }

    /// Data and prior terms of the cost.
    pub fn smooth_cost(&self, tau: &Array2<f64>) -> f64 {
        let data = self.residual(tau).iter().map(|r| r * r).sum::<f64>();
        let lp = match &self.lp {
            Some(lp) if self.gamma > 0.0 => {
                self.gamma
                    * Zip::from(tau)
                        .and(lp)
                        .fold(0.0, |a, &t, &p| a + (t - p) * (t - p))
            }
            _ => 0.0,
        };
        let gp = match &self.gp {
            Some(gp) if self.beta > 0.0 => {
                self.beta
                    * Zip::from(tau)
                        .and(gp)
                        .and(&self.gp_weight)
                        .fold(0.0, |a, &t, &p, &w| a + w * (t - p) * (t - p))
            }
            _ => 0.0,
        };
        data + lp + gp
    }

    /// Gradient of [`Problem::smooth_cost`].
    pub fn smooth_gradient(&self, tau: &Array2<f64>) -> Array2<f64> {
        let mut g =
            decimate_adjoint_array(&self.residual(tau), &self.map).expect("shape checked") * 2.0;
        if let (Some(lp), true) = (&self.lp, self.gamma > 0.0) {
            let k = 2.0 * self.gamma;
            Zip::from(&mut g)
                .and(tau)
                .and(lp)
                .for_each(|g, &t, &p| *g += k * (t - p));
        }
        if let (Some(gp), true) = (&self.gp, self.beta > 0.0) {
            let k = 2.0 * self.beta;
            Zip::from(&mut g)
                .and(tau)
                .and(gp)
                .and(&self.gp_weight)
                .for_each(|g, &t, &p, &w| *g += k * w * (t - p));
        }
        g
    }

    /// Full cost `C(τ)` including the TV term.
    pub fn cost(&self, tau: &Array2<f64>, alpha: f64) -> f64 {
        self.smooth_cost(tau) + alpha * tv_forward(tau).l1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub tau_hat: Array2<f64>,
    pub z: GradientField,
    pub y: GradientField,
    pub history: Vec<IterationRecord>,
}

impl SolverState {
    /// `τ₀ = max(τ_init, 0)`, `z₀ = D τ₀`, `y₀ = 0`.
    pub fn new(tau_init: Array2<f64>) -> Self {
        let tau_hat = tau_init.mapv(|v| v.max(0.0));
        let z = tv_forward(&tau_hat);
        let y = GradientField::zeros(tau_hat.dim());
        SolverState {
            tau_hat,
            z,
            y,
            history: Vec::new(),
        }
    }
}

/// Augmented-Lagrangian objective minimized by the primal update.
pub fn primal_objective(
    problem: &Problem,
    state: &SolverState,
    tau: &Array2<f64>,
    rho: f64,
) -> f64 {
    let r = tv_forward(tau).scaled_add(-1.0, &state.z);
    problem.smooth_cost(tau) + state.y.dot(&r) + 0.5 * rho * r.dot(&r)
}

fn primal_gradient(
    problem: &Problem,
    state: &SolverState,
    tau: &Array2<f64>,
    rho: f64,
) -> Array2<f64> {
    let r = tv_forward(tau).scaled_add(-1.0, &state.z);
    let dual = state.y.scaled_add(rho, &r);
    problem.smooth_gradient(tau) + tv_adjoint(&dual)
}

/// Runs the projected, monotone FISTA primal update from `state.tau_hat`
/// with a fresh momentum sequence. Returns the objective after each step.
pub fn primal_update(
    problem: &Problem,
    state: &mut SolverState,
    cfg: &ReconstructionConfig,
) -> Result<Vec<f64>> {
    let step = cfg.fista_step.unwrap_or(1.0 / cfg.lipschitz());
    let rho = cfg.rho;
    let mut x = state.tau_hat.clone();
    let mut fx = primal_objective(problem, state, &x, rho);
    let mut x_prev = x.clone();
    let mut v = x.clone();
    let mut t: f64 = 1.0;
    let mut trace = Vec::with_capacity(cfg.fista_iters);
    for _ in 0..cfg.fista_iters {
        let g = primal_gradient(problem, state, &v, rho);
        let mut cand = v.clone();
        Zip::from(&mut cand)
            .and(&g)
            .for_each(|c, &g| *c = (*c - step * g).max(0.0));
        let fc = primal_objective(problem, state, &cand, rho);
        if !fc.is_finite() {
            return Err(Error::NonFinite(
                "primal iterate diverged; reduce fista_step or the weights".into(),
            ));
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        x_prev.assign(&x);
        if fc <= fx {
            x.assign(&cand);
            fx = fc;
        }
        // v = x + (t/t')(cand - x) + ((t-1)/t')(x - x_prev)
        let (a, b) = (t / t_next, (t - 1.0) / t_next);
        Zip::from(&mut v)
            .and(&x)
            .and(&cand)
            .and(&x_prev)
            .for_each(|v, &x, &c, &p| *v = x + a * (c - x) + b * (x - p));
        t = t_next;
        trace.push(fx);
    }
    state.tau_hat = x;
    Ok(trace)
}

/// `z = shrink(D τ + y / ρ, α / ρ)`.
pub fn z_update(state: &mut SolverState, alpha: f64, rho: f64) {
    let d = tv_forward(&state.tau_hat);
    let kappa = alpha / rho;
    state.z = d.scaled_add(1.0 / rho, &state.y).map(|v| shrink(v, kappa));
}

/// `y ← y + ρ (D τ − z)`.
pub fn dual_update(state: &mut SolverState, rho: f64) {
    let r = tv_forward(&state.tau_hat).scaled_add(-1.0, &state.z);
    state.y = state.y.scaled_add(rho, &r);
}

/// α default: `0.01 · median |D τ₀|` over nonzero entries (0 if none).
pub fn default_alpha(tau0: &Array2<f64>) -> f64 {
    let g = tv_forward(tau0);
    let mut mags: Vec<f64> =
        g.dx.iter()
            .chain(g.dy.iter())
            .map(|v| v.abs())
            .filter(|&v| v > 0.0)
            .collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let n = mags.len();
    let median = if n % 2 == 1 {
        mags[n / 2]
    } else {
        0.5 * (mags[n / 2 - 1] + mags[n / 2])
    };
    ALPHA_SCALE * median
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub tau: Plane,
    pub alpha: f64,
    pub state: SolverState,
}

/// Bilinear start with unsampled LR entries replaced by the mean of the
/// sampled ones.
pub fn initial_estimate(lr_tau: &Plane, map: &SamplingMap) -> Result<Array2<f64>> {
    let valid: Vec<f64> = lr_tau
        .values()
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .collect();
    if valid.is_empty() {
        return Err(Error::NoUsableSamples);
    }
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    let filled = lr_tau.values().mapv(|v| if v.is_nan() { mean } else { v });
    bilinear_array(&filled, map)
}

/// Runs the full ADMM loop from the bilinear initialization.
pub fn reconstruct(
    lr_tau: &Plane,
    lp: Option<&Plane>,
    gp: Option<&Plane>,
    gp_weight: Option<&Plane>,
    map: &SamplingMap,
    cfg: &ReconstructionConfig,
) -> Result<Reconstruction> {
    cfg.validate()?;
    let problem = Problem::new(lr_tau, lp, gp, gp_weight, map, cfg)?;
    let tau0 = initial_estimate(lr_tau, map)?;
    let mut state = SolverState::new(tau0);
    let alpha = cfg.alpha.unwrap_or_else(|| default_alpha(&state.tau_hat));
    for iter in 1..=cfg.admm_iters {
        primal_update(&problem, &mut state, cfg)?;
        let z_prev = state.z.clone();
        z_update(&mut state, alpha, cfg.rho);
        dual_update(&mut state, cfg.rho);
        if !(state.z.is_finite() && state.y.is_finite()) {
            return Err(Error::NonFinite(format!("ADMM state at iteration {iter}")));
        }
        let primal_residual = tv_forward(&state.tau_hat).scaled_add(-1.0, &state.z).norm();
        let dual_residual = cfg.rho * state.z.scaled_add(-1.0, &z_prev).norm();
        state.history.push(IterationRecord {
            iter,
            cost: problem.cost(&state.tau_hat, alpha),
            primal_residual,
            dual_residual,
        });
    }
    let tau = Plane::new(state.tau_hat.clone(), Role::Lifetime, lr_tau.units())?;
    Ok(Reconstruction { tau, alpha, state })
}

/// `iter,cost,primal_residual,dual_residual` rows.
pub fn history_to_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("iter,cost,primal_residual,dual_residual\n");
    for h in history {
        out.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            h.iter, h.cost, h.primal_residual, h.dual_residual
        ));
    }
    out
}

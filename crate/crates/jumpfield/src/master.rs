//! The decoupling field V(t, x, mu) as an evaluable object, its
//! measure-derivative estimators, and the master-equation residual
//! checker.
//!
//! Two field implementations share one interface: `ClosedFormField`
//! (the benchmark families, with exact derivatives) and
//! `DecouplingField` (Monte Carlo: a cached self-interacting solve from
//! (t, cloud) freezes the measure flow, a pinned solve from x reads off
//! V). The residual assembles the master equation term by term; a field
//! that solves the equation drives every term combination to zero, and
//! an injected perturbation V + eps (T - t) is detected as a residual of
//! -eps.

use crate::drivers::TimeGrid;
use crate::error::{Error, Result};
use crate::measure::{MeasureFlow, ParticleCloud};
use crate::model::{InitialLaw, MeasureView, ProblemSpec};
use crate::oracle::BenchmarkFamily;
use crate::picard::{picard_solve_pinned, picard_solve_with_noise, SolutionBundle};
use crate::regression::RegressionBasis;
use crate::sensitivity::{
    fd_dv_dmu, fd_hessian_x, solve_dmu, solve_dx_with_flow, DmuConfig, ScalarField,
};
use serde::Serialize;
use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

/// Salt for the auxiliary copies of measure-derivative solves, so they
/// are decoupled from the cloud and pinned streams.
const DMU_SEED_SALT: u64 = 0xD0_0D_00D0_0001;

/// Finite-difference and subsampling controls of the residual assembly.
#[derive(Debug, Clone)]
pub struct FdSteps {
    /// Step of the central second difference in x.
    pub eps_x: f64,
    /// Step of the time difference; None means one grid step.
    pub eps_t: Option<f64>,
    /// Step of the central difference in the probe point v.
    pub eps_v: f64,
    /// Cap on the fixed-stride cloud subsample of the measure terms.
    pub subsample_cap: usize,
}

impl Default for FdSteps {
    fn default() -> Self {
        Self {
            eps_x: 1e-2,
            eps_t: None,
            eps_v: 1e-2,
            subsample_cap: 64,
        }
    }
}

/// Everything the residual checker needs from a candidate decoupling
/// field. Implementations may return exact values (closed forms) or
/// Monte Carlo estimates with the documented finite-difference steps.
pub trait MasterField: Sync {
    fn horizon(&self) -> f64;

    /// (value, Monte Carlo standard error); exact fields report 0.
    fn eval(&self, t: f64, x: &[f64], cloud: &ParticleCloud) -> Result<(f64, f64)>;

    fn grad_x(&self, t: f64, x: &[f64], cloud: &ParticleCloud) -> Result<Vec<f64>>;

    fn hessian_x(&self, t: f64, x: &[f64], cloud: &ParticleCloud, eps: f64) -> Result<Vec<f64>>;

    /// Partial derivative in t at fixed (x, mu); `eps` of 0 or less asks
    /// the implementation for its natural step.
    fn time_derivative(&self, t: f64, x: &[f64], cloud: &ParticleCloud, eps: f64) -> Result<f64>;

    /// Linear derivative dV/dmu(t, x, mu)(y), up to an additive constant
    /// shared across y (normalized implementations subtract the cloud
    /// average).
    fn linear_derivative(&self, t: f64, x: &[f64], cloud: &ParticleCloud, y: &[f64])
        -> Result<f64>;

    /// Difference of linear derivatives at two probe atoms; the additive
    /// normalization constant cancels, so implementations may shortcut.
    fn linear_derivative_diff(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        y_from: &[f64],
        y_to: &[f64],
    ) -> Result<f64> {
        Ok(self.linear_derivative(t, x, cloud, y_to)?
            - self.linear_derivative(t, x, cloud, y_from)?)
    }

    /// Lions derivative d_mu V(t, x, mu)(v), one component per direction.
    fn dmu(&self, t: f64, x: &[f64], cloud: &ParticleCloud, v: &[f64]) -> Result<Vec<f64>>;

    /// d_v d_mu V(t, x, mu)(v), row-major d x d.
    fn dv_dmu(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        v: &[f64],
        eps: f64,
    ) -> Result<Vec<f64>>;

    /// True when no coefficient depends on the measure, so every measure
    /// term of the residual is identically zero and can be skipped.
    fn measure_terms_vanish(&self) -> bool {
        false
    }

    /// Derivative of s -> V(s, x, mu_s) along the problem's own measure
    /// flow started from (t, cloud); by the master equation this equals
    /// dV/dt plus all measure terms. Monte Carlo implementations prefer
    /// it to a fixed-measure time difference because the flow evolution
    /// cancels the cloud noise exactly under common random numbers; the
    /// optional control variate removes the first-order pinned noise
    /// too. None means the implementation has no flow (exact fields
    /// differentiate directly).
    fn flow_time_derivative(
        &self,
        _t: f64,
        _x: &[f64],
        _cloud: &ParticleCloud,
        _eps: f64,
        _cv: Option<&TimeControlVariate>,
    ) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// First-order sensitivities at the evaluation point, used to cancel
/// the sample-mean noise of a time difference: the window's Brownian
/// and jump-count averages have known zero-mean deviations that enter
/// the estimator through dV/dx sigma and the jump increments of V.
#[derive(Debug, Clone)]
pub struct TimeControlVariate<'a> {
    /// dV/dx at (t, x).
    pub grad: &'a [f64],
    /// sigma(t, x, mu, V), row-major d x d.
    pub sigma: &'a [f64],
    /// V(x + h_k) - V(x) per jump atom (unweighted).
    pub jump_values: &'a [f64],
}

/// Exact field of a benchmark family.
#[derive(Debug, Clone)]
pub struct ClosedFormField {
    pub family: BenchmarkFamily,
}

impl ClosedFormField {
    pub fn new(family: BenchmarkFamily) -> Self {
        Self { family }
    }
}

impl ScalarField for ClosedFormField {
    fn eval(&self, t: f64, x: &[f64], cloud: &ParticleCloud) -> Result<f64> {
        Ok(self.family.closed_form_v(t, x[0], cloud))
    }
}

impl MasterField for ClosedFormField {
    fn horizon(&self) -> f64 {
        self.family.horizon
    }

    fn eval(&self, t: f64, x: &[f64], cloud: &ParticleCloud) -> Result<(f64, f64)> {
        Ok((self.family.closed_form_v(t, x[0], cloud), 0.0))
    }

    fn grad_x(&self, t: f64, _x: &[f64], _cloud: &ParticleCloud) -> Result<Vec<f64>> {
        Ok(vec![self.family.closed_form_dx_v(t)])
    }

    fn hessian_x(&self, _t: f64, _x: &[f64], _cloud: &ParticleCloud, _eps: f64) -> Result<Vec<f64>> {
        Ok(vec![self.family.closed_form_d2x_v()])
    }

    fn time_derivative(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        _eps: f64,
    ) -> Result<f64> {
        Ok(self.family.closed_form_dt_v(t, x[0], cloud))
    }

    fn linear_derivative(
        &self,
        t: f64,
        _x: &[f64],
        cloud: &ParticleCloud,
        y: &[f64],
    ) -> Result<f64> {
        Ok(self.family.closed_form_linear_derivative(t, y[0], cloud))
    }

    fn dmu(&self, t: f64, _x: &[f64], _cloud: &ParticleCloud, v: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.family.closed_form_dmu_v(t, v[0])])
    }

    fn dv_dmu(
        &self,
        _t: f64,
        _x: &[f64],
        _cloud: &ParticleCloud,
        _v: &[f64],
        _eps: f64,
    ) -> Result<Vec<f64>> {
        Ok(vec![self.family.closed_form_dv_dmu_v()])
    }

    fn measure_terms_vanish(&self) -> bool {
        use crate::oracle::FamilyId;
        matches!(self.family.id, FamilyId::A | FamilyId::C)
    }
}

/// An additive time perturbation V + eps (T - t) of another field; the
/// residual detector must report a total of about -eps on it.
pub struct PerturbedField<'a> {
    pub inner: &'a dyn MasterField,
    pub eps: f64,
}

impl MasterField for PerturbedField<'_> {
    fn horizon(&self) -> f64 {
        self.inner.horizon()
    }

    fn eval(&self, t: f64, x: &[f64], cloud: &ParticleCloud) -> Result<(f64, f64)> {
        let (v, se) = self.inner.eval(t, x, cloud)?;
        Ok((v + self.eps * (self.horizon() - t), se))
    }

    fn grad_x(&self, t: f64, x: &[f64], cloud: &ParticleCloud) -> Result<Vec<f64>> {
        self.inner.grad_x(t, x, cloud)
    }

    fn hessian_x(&self, t: f64, x: &[f64], cloud: &ParticleCloud, eps: f64) -> Result<Vec<f64>> {
        self.inner.hessian_x(t, x, cloud, eps)
    }

    fn time_derivative(&self, t: f64, x: &[f64], cloud: &ParticleCloud, eps: f64) -> Result<f64> {
        Ok(self.inner.time_derivative(t, x, cloud, eps)? - self.eps)
    }

    fn linear_derivative(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        y: &[f64],
    ) -> Result<f64> {
        self.inner.linear_derivative(t, x, cloud, y)
    }

    fn dmu(&self, t: f64, x: &[f64], cloud: &ParticleCloud, v: &[f64]) -> Result<Vec<f64>> {
        self.inner.dmu(t, x, cloud, v)
    }

    fn dv_dmu(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        v: &[f64],
        eps: f64,
    ) -> Result<Vec<f64>> {
        self.inner.dv_dmu(t, x, cloud, v, eps)
    }

    fn measure_terms_vanish(&self) -> bool {
        self.inner.measure_terms_vanish()
    }

    fn flow_time_derivative(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        eps: f64,
        cv: Option<&TimeControlVariate>,
    ) -> Result<Option<f64>> {
        Ok(self
            .inner
            .flow_time_derivative(t, x, cloud, eps, cv)?
            .map(|d| d - self.eps))
    }
}

/// Numerics of the Monte Carlo field.
#[derive(Debug, Clone)]
pub struct FieldConfig {
    /// Minimum particle count of the self-interacting solve; clouds are
    /// replicated (cycled) up to at least this size.
    pub particles: usize,
    /// Copies of the pinned system.
    pub copies: usize,
    /// Steps of the global grid over [0, T]; evaluation times snap to it.
    pub steps: usize,
    /// Copies of the pinned system used for the time derivative alone.
    /// Under common random numbers a finite difference in t reduces to
    /// the jump-count fluctuation over the window, with standard error
    /// about c sqrt(lambda / (window * M)); the window is short, so this
    /// M wants to be large, and pinned solves are cheap enough for it.
    pub time_copies: usize,
    pub seed: u64,
    pub basis: RegressionBasis,
    pub tol: f64,
    pub max_iter: usize,
    pub dmu: DmuConfig,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            particles: 4000,
            copies: 2000,
            steps: 50,
            time_copies: 20_000,
            seed: 1,
            basis: RegressionBasis::default(),
            tol: 1e-6,
            max_iter: 8,
            dmu: DmuConfig::default(),
        }
    }
}

struct CachedSolve {
    mv: Arc<SolutionBundle>,
    flow: Arc<MeasureFlow>,
}

/// Monte Carlo evaluator of V(t, x, mu) = Y_t of the pinned system:
/// measure flows from (t, cloud) are solved once and cached by
/// (grid index of t, cloud content hash), so repeated evaluation with an
/// identical key returns identical values.
pub struct DecouplingField {
    pub spec: ProblemSpec,
    pub cfg: FieldConfig,
    measure_free: bool,
    cache: Mutex<HashMap<(usize, u64), Arc<CachedSolve>>>,
}

impl DecouplingField {
    pub fn new(spec: ProblemSpec, cfg: FieldConfig) -> Result<Self> {
        spec.validate()?;
        if cfg.steps == 0 || cfg.particles == 0 || cfg.copies == 0 {
            return Err(Error::structural("field config needs steps, N, M >= 1"));
        }
        let measure_free = crate::sensitivity::measure_derivatives_vanish(&spec);
        Ok(Self {
            spec,
            cfg,
            measure_free,
            cache: Mutex::new(HashMap::new()),
        })
    }

    fn dt(&self) -> f64 {
        self.spec.horizon / self.cfg.steps as f64
    }

    /// Snaps t to the global grid; returns (node index, snapped time).
    fn snap(&self, t: f64) -> Result<(usize, f64)> {
        let dt = self.dt();
        if !(-1e-9..=self.spec.horizon + 1e-9).contains(&t) {
            return Err(Error::structural(format!(
                "evaluation time {t} outside [0, {}]",
                self.spec.horizon
            )));
        }
        let i = (t / dt).round().clamp(0.0, self.cfg.steps as f64) as usize;
        Ok((i, i as f64 * dt))
    }

    /// Cycles the cloud to at least the configured particle count, so the
    /// empirical law is preserved exactly.
    fn replicate(&self, cloud: &ParticleCloud) -> ParticleCloud {
        let n = cloud.len();
        if n >= self.cfg.particles {
            return cloud.clone();
        }
        let k = self.cfg.particles.div_ceil(n);
        let mut points = Vec::with_capacity(k * n * cloud.dim());
        for _ in 0..k {
            points.extend_from_slice(cloud.points());
        }
        ParticleCloud::new(points, k * n, cloud.dim()).expect("replication preserves finiteness")
    }

    /// The cached self-interacting solve from (t, cloud).
    fn flow_from(&self, t: f64, cloud: &ParticleCloud) -> Result<(TimeGrid, Arc<CachedSolve>)> {
        let (i, t0) = self.snap(t)?;
        if i >= self.cfg.steps {
            return Err(Error::structural("no flow beyond the terminal time"));
        }
        let grid = TimeGrid::new(t0, self.spec.horizon, self.cfg.steps - i)?;
        let work = self.replicate(cloud);
        let key = (i, work.content_hash());
        if let Some(hit) = self.cache.lock().expect("field cache").get(&key) {
            return Ok((grid, Arc::clone(hit)));
        }
        let mut spec = self.spec.clone();
        spec.initial_law = InitialLaw::Atoms {
            points: (0..work.len()).map(|p| work.point(p).to_vec()).collect(),
        };
        let noise = crate::drivers::sample_noise(
            &grid,
            &spec.coeffs.jump,
            work.len(),
            self.cfg.seed,
            spec.coeffs.dim,
        )?;
        let mv = picard_solve_with_noise(
            &spec,
            &grid,
            &noise,
            &work,
            &self.cfg.basis,
            self.cfg.tol,
            self.cfg.max_iter,
        )?;
        let entry = Arc::new(CachedSolve {
            flow: Arc::new(mv.flow()),
            mv: Arc::new(mv),
        });
        self.cache
            .lock()
            .expect("field cache")
            .insert(key, Arc::clone(&entry));
        Ok((grid, entry))
    }

    fn pinned_at(
        &self,
        grid: &TimeGrid,
        flow: &MeasureFlow,
        x: &[f64],
    ) -> Result<SolutionBundle> {
        self.pinned_with_copies(grid, flow, x, self.cfg.copies)
    }

    fn pinned_with_copies(
        &self,
        grid: &TimeGrid,
        flow: &MeasureFlow,
        x: &[f64],
        copies: usize,
    ) -> Result<SolutionBundle> {
        picard_solve_pinned(
            &self.spec,
            flow,
            grid,
            x,
            copies,
            self.cfg.seed,
            &self.cfg.basis,
            self.cfg.tol,
            self.cfg.max_iter,
        )
    }

    /// V(t, x, mu) with its Monte Carlo standard error. At the terminal
    /// time the value is g(x, mu) exactly.
    pub fn eval_v(&self, t: f64, x: &[f64], cloud: &ParticleCloud) -> Result<(f64, f64)> {
        self.eval_v_with_copies(t, x, cloud, self.cfg.copies)
    }

    fn eval_v_with_copies(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        copies: usize,
    ) -> Result<(f64, f64)> {
        let (i, _) = self.snap(t)?;
        if i == self.cfg.steps {
            let mu = MeasureView::new(cloud);
            return Ok((self.spec.coeffs.maps.terminal(x, &mu), 0.0));
        }
        let (grid, solve) = self.flow_from(t, cloud)?;
        let pinned = self.pinned_with_copies(&grid, &solve.flow, x, copies)?;
        Ok(pinned.value_at_start())
    }

    /// Raw linear-derivative estimator: (N+1) [V(mu bumped at y) -
    /// V(mu bumped at the barycenter)]; an additive constant (shared
    /// across y) away from dV/dmu. Both bumps ride on common random
    /// numbers, so differences of this estimator are low-noise.
    pub fn eval_linear_derivative(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        y: &[f64],
    ) -> Result<f64> {
        let reference = cloud.mean();
        self.linear_derivative_between(t, x, cloud, &reference, y)
    }

    fn linear_derivative_between(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        y_from: &[f64],
        y_to: &[f64],
    ) -> Result<f64> {
        let work = self.replicate(cloud);
        let scale = (work.len() + 1) as f64;
        let to = self.eval_v(t, x, &work.bump_add_atom(y_to)?)?.0;
        let from = self.eval_v(t, x, &work.bump_add_atom(y_from)?)?.0;
        Ok(scale * (to - from))
    }

    /// Normalized linear derivative: the cloud average of the raw
    /// estimator is subtracted, enforcing a zero integral against mu.
    pub fn eval_linear_derivative_normalized(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        y: &[f64],
        subsample_cap: usize,
    ) -> Result<f64> {
        let raw = self.eval_linear_derivative(t, x, cloud, y)?;
        let sub = crate::sensitivity::subsample_indices(cloud.len(), subsample_cap);
        let mut avg = 0.0;
        for &j in &sub {
            avg += self.eval_linear_derivative(t, x, cloud, cloud.point(j))?;
        }
        Ok(raw - avg / sub.len() as f64)
    }

    /// The converged (mv, pinned) pair at (t, x, cloud), for the
    /// sensitivity systems.
    fn bundles_at(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
    ) -> Result<(TimeGrid, Arc<CachedSolve>, SolutionBundle)> {
        let (grid, solve) = self.flow_from(t, cloud)?;
        let pinned = self.pinned_at(&grid, &solve.flow, x)?;
        Ok((grid, solve, pinned))
    }
}

impl ScalarField for DecouplingField {
    fn eval(&self, t: f64, x: &[f64], cloud: &ParticleCloud) -> Result<f64> {
        Ok(self.eval_v(t, x, cloud)?.0)
    }
}

impl MasterField for DecouplingField {
    fn horizon(&self) -> f64 {
        self.spec.horizon
    }

    fn eval(&self, t: f64, x: &[f64], cloud: &ParticleCloud) -> Result<(f64, f64)> {
        self.eval_v(t, x, cloud)
    }

    fn grad_x(&self, t: f64, x: &[f64], cloud: &ParticleCloud) -> Result<Vec<f64>> {
        let (i, _) = self.snap(t)?;
        if i == self.cfg.steps {
            // gradient of the terminal map, by central differences
            let mu = MeasureView::new(cloud);
            let d = x.len();
            let mut out = vec![0.0; d];
            let mut xp = x.to_vec();
            for k in 0..d {
                xp[k] = x[k] + 1e-6;
                let up = self.spec.coeffs.maps.terminal(&xp, &mu);
                xp[k] = x[k] - 1e-6;
                let um = self.spec.coeffs.maps.terminal(&xp, &mu);
                xp[k] = x[k];
                out[k] = (up - um) / 2e-6;
            }
            return Ok(out);
        }
        let (grid, solve, pinned) = self.bundles_at(t, x, cloud)?;
        let dx = solve_dx_with_flow(&pinned, &self.spec, &grid, &self.cfg.basis, Some(&solve.flow))?;
        Ok(dx.dy0)
    }

    fn hessian_x(&self, t: f64, x: &[f64], cloud: &ParticleCloud, eps: f64) -> Result<Vec<f64>> {
        fd_hessian_x(self, t, x, cloud, eps)
    }

    fn time_derivative(&self, t: f64, x: &[f64], cloud: &ParticleCloud, eps: f64) -> Result<f64> {
        // snap the step to a whole number of grid cells so both stencil
        // points reuse the per-(particle, global step) noise streams;
        // the natural window is 4 cells, trading a little smoothing bias
        // for a 1/sqrt(window) cut of the jump-count noise
        let dt = self.dt();
        let cells = if eps > 0.0 {
            ((eps / dt).round() as usize).max(1)
        } else {
            4.min(self.cfg.steps)
        };
        let h = cells as f64 * dt;
        let m = self.cfg.time_copies.max(self.cfg.copies);
        let at = |s: f64| -> Result<f64> { Ok(self.eval_v_with_copies(s, x, cloud, m)?.0) };
        let (i, t0) = self.snap(t)?;
        let lo = i >= cells;
        let hi = i + cells <= self.cfg.steps;
        let (va, vb, span) = if lo && hi {
            (at(t0 - h)?, at(t0 + h)?, 2.0 * h)
        } else if hi {
            (at(t0)?, at(t0 + h)?, h)
        } else if lo {
            (at(t0 - h)?, at(t0)?, h)
        } else {
            return Err(Error::structural("grid too coarse for a time difference"));
        };
        Ok((vb - va) / span)
    }

    fn flow_time_derivative(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        eps: f64,
        cv: Option<&TimeControlVariate>,
    ) -> Result<Option<f64>> {
        let dt = self.dt();
        let (i, t0) = self.snap(t)?;
        if i >= self.cfg.steps {
            return Err(Error::structural("no flow beyond the terminal time"));
        }
        let cells = if eps > 0.0 {
            ((eps / dt).round() as usize).max(1)
        } else {
            4
        }
        .min(self.cfg.steps - i);
        let h = cells as f64 * dt;
        let m = self.cfg.time_copies.max(self.cfg.copies);

        // the base evaluation and the cloud it has evolved to t + h;
        // re-solving from the evolved cloud reproduces the flow tail on
        // shared noise streams, so the measure channel cancels exactly
        let (grid1, solve1) = self.flow_from(t0, cloud)?;
        let pinned1 = self.pinned_with_copies(&grid1, &solve1.flow, x, m)?;
        let v1 = pinned1.value_at_start().0;
        let evolved = solve1.mv.paths.cloud(cells);
        let v2 = if i + cells == self.cfg.steps {
            let mu = MeasureView::new(&evolved);
            self.spec.coeffs.maps.terminal(x, &mu)
        } else {
            let (grid2, solve2) = self.flow_from(t0 + h, &evolved)?;
            self.pinned_with_copies(&grid2, &solve2.flow, x, m)?
                .value_at_start()
                .0
        };
        let mut deriv = (v2 - v1) / h;

        if let Some(cv) = cv {
            // the base value v1 carries the window's Brownian and
            // jump-count sample means; both have known zero expectation,
            // so adding back their first-order effect cancels the noise
            // without biasing the estimator
            let d = self.spec.coeffs.dim;
            let noise = crate::drivers::sample_noise(
                &grid1,
                &self.spec.coeffs.jump,
                m,
                pinned1.seed,
                d,
            )?;
            let mut w_bar = vec![0.0; d];
            let atoms = self.spec.coeffs.jump.atom_count();
            let mut j_bar = vec![0.0; atoms];
            for p in 0..m {
                for s in 0..cells {
                    for (wk, dwk) in w_bar.iter_mut().zip(noise.dw(p, s)) {
                        *wk += dwk;
                    }
                    for &atom in noise.jumps(p, s) {
                        j_bar[atom as usize] += 1.0;
                    }
                }
            }
            let inv = 1.0 / m as f64;
            let mut correction = 0.0;
            for j in 0..d {
                for k in 0..d {
                    correction += cv.grad[j] * cv.sigma[j * d + k] * w_bar[k] * inv;
                }
            }
            for (k, atom) in self.spec.coeffs.jump.atoms.iter().enumerate() {
                correction += cv.jump_values[k] * (j_bar[k] * inv - atom.weight * h);
            }
            deriv += correction / h;
        }
        Ok(Some(deriv))
    }

    fn linear_derivative(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        y: &[f64],
    ) -> Result<f64> {
        self.eval_linear_derivative(t, x, cloud, y)
    }

    fn linear_derivative_diff(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        y_from: &[f64],
        y_to: &[f64],
    ) -> Result<f64> {
        // the barycentric reference cancels: two bumped solves suffice
        self.linear_derivative_between(t, x, cloud, y_from, y_to)
    }

    fn dmu(&self, t: f64, x: &[f64], cloud: &ParticleCloud, v: &[f64]) -> Result<Vec<f64>> {
        let (grid, solve, pinned) = self.bundles_at(t, x, cloud)?;
        let out = solve_dmu(
            &self.spec,
            &grid,
            &self.cfg.basis,
            &solve.mv,
            &pinned,
            v,
            &self.cfg.dmu,
            self.cfg.seed ^ DMU_SEED_SALT,
        )?;
        Ok(out.dmu_y0)
    }

    fn dv_dmu(
        &self,
        t: f64,
        x: &[f64],
        cloud: &ParticleCloud,
        v: &[f64],
        eps: f64,
    ) -> Result<Vec<f64>> {
        let (grid, solve, pinned) = self.bundles_at(t, x, cloud)?;
        fd_dv_dmu(
            &self.spec,
            &grid,
            &self.cfg.basis,
            &solve.mv,
            &pinned,
            v,
            eps,
            &self.cfg.dmu,
            self.cfg.seed ^ DMU_SEED_SALT,
        )
    }

    fn measure_terms_vanish(&self) -> bool {
        self.measure_free
    }
}

/// The master equation assembled term by term at one evaluation point.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub t: f64,
    pub x: Vec<f64>,
    pub time_term: f64,
    pub drift_term: f64,
    pub driver_term: f64,
    pub jump_x_term: f64,
    pub diffusion_term: f64,
    pub measure_drift_term: f64,
    pub measure_diffusion_term: f64,
    pub measure_jump_term: f64,
    pub total: f64,
    /// Monte Carlo standard error of the value evaluations feeding the
    /// report (0 for exact fields); finite-difference amplification is
    /// not included.
    pub tolerance: f64,
}

impl ResidualReport {
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("time", self.time_term),
            ("drift", self.drift_term),
            ("driver", self.driver_term),
            ("jump_x", self.jump_x_term),
            ("diffusion", self.diffusion_term),
            ("measure_drift", self.measure_drift_term),
            ("measure_diffusion", self.measure_diffusion_term),
            ("measure_jump", self.measure_jump_term),
        ]
    }
}

/// CSV export of residual reports: point, term name, value, tolerance.
pub fn write_residual_csv<W: Write>(reports: &[ResidualReport], w: &mut W) -> Result<()> {
    writeln!(w, "t,x0,term,value,tolerance")?;
    for r in reports {
        for (name, value) in r.terms() {
            writeln!(w, "{:.17e},{:.17e},{name},{value:.17e},{:.17e}", r.t, r.x[0], r.tolerance)?;
        }
        writeln!(w, "{:.17e},{:.17e},total,{:.17e},{:.17e}", r.t, r.x[0], r.total, r.tolerance)?;
    }
    Ok(())
}

/// Evaluates the master-equation residual of `field` at (t, x, cloud)
/// for the problem `spec`. The Z-argument of b and f is formed as
/// grad_x V . sigma; measure terms are cloud averages over a fixed-stride
/// subsample; time/second-order derivatives come from the field's own
/// estimators with the configured steps.
pub fn residual(
    field: &dyn MasterField,
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    cloud: &ParticleCloud,
    fd: &FdSteps,
) -> Result<ResidualReport> {
    let d = spec.coeffs.dim;
    let maps = spec.coeffs.maps.as_ref();
    let atoms = &spec.coeffs.jump.atoms;
    let mu = MeasureView::new(cloud);

    let (v, se) = field.eval(t, x, cloud)?;
    let grad = field.grad_x(t, x, cloud)?;

    // the identification Z = grad_x V . sigma supplies the z-arguments
    let mut sigma = vec![0.0; d * d];
    maps.diffusion(t, x, &mu, v, &mut sigma);
    let mut z = vec![0.0; d];
    for k in 0..d {
        for j in 0..d {
            z[k] += grad[j] * sigma[j * d + k];
        }
    }

    let mut b = vec![0.0; d];
    maps.drift(t, x, &mu, v, &z, &mut b);
    let drift_term: f64 = grad.iter().zip(&b).map(|(g, bj)| g * bj).sum();

    let driver_term = maps.driver(t, x, &mu, v, &z);

    let mut jump_x_term = 0.0;
    let mut jump_values = Vec::with_capacity(atoms.len());
    let mut hshift = vec![0.0; d];
    let mut bumped = x.to_vec();
    for atom in atoms {
        maps.jump_shift(t, x, &mu, v, &atom.mark, &mut hshift);
        for j in 0..d {
            bumped[j] = x[j] + hshift[j];
        }
        let diff = field.eval(t, &bumped, cloud)?.0 - v;
        jump_values.push(diff);
        jump_x_term += atom.weight * diff;
    }

    // (1/2) sigma sigma^T : hess
    let hess = field.hessian_x(t, x, cloud, fd.eps_x)?;
    let mut diffusion_term = 0.0;
    for j in 0..d {
        for k in 0..d {
            let mut a = 0.0;
            for l in 0..d {
                a += sigma[j * d + l] * sigma[k * d + l];
            }
            diffusion_term += 0.5 * a * hess[j * d + k];
        }
    }

    let mut measure_drift_term = 0.0;
    let mut measure_diffusion_term = 0.0;
    let mut measure_jump_term = 0.0;
    if !field.measure_terms_vanish() {
        let sub = crate::sensitivity::subsample_indices(cloud.len(), fd.subsample_cap);
        let inv = 1.0 / sub.len() as f64;
        // probe whether b / sigma vanish identically at a few points, to
        // skip the expensive nested estimators they multiply
        let b_zero = coefficient_vanishes(spec, |t, y, mu, v, z, out| {
            maps.drift(t, y, mu, v, z, out)
        });
        let sigma_zero = coefficient_vanishes(spec, |t, y, mu, v, _z, out| {
            maps.diffusion(t, y, mu, v, out)
        });
        let mut sig_y = vec![0.0; d * d];
        let mut b_y = vec![0.0; d];
        let mut h_y = vec![0.0; d];
        let mut y_to = vec![0.0; d];
        for &j in &sub {
            let y = cloud.point(j);
            let v_y = field.eval(t, y, cloud)?.0;
            if !b_zero {
                let grad_y = field.grad_x(t, y, cloud)?;
                maps.diffusion(t, y, &mu, v_y, &mut sig_y);
                let mut z_y = vec![0.0; d];
                for k in 0..d {
                    for l in 0..d {
                        z_y[k] += grad_y[l] * sig_y[l * d + k];
                    }
                }
                maps.drift(t, y, &mu, v_y, &z_y, &mut b_y);
                let dmu_v = field.dmu(t, x, cloud, y)?;
                measure_drift_term +=
                    inv * dmu_v.iter().zip(&b_y).map(|(a, c)| a * c).sum::<f64>();
            }
            if !sigma_zero {
                maps.diffusion(t, y, &mu, v_y, &mut sig_y);
                let dv = field.dv_dmu(t, x, cloud, y, fd.eps_v)?;
                for j2 in 0..d {
                    for k in 0..d {
                        let mut a = 0.0;
                        for l in 0..d {
                            a += sig_y[j2 * d + l] * sig_y[k * d + l];
                        }
                        measure_diffusion_term += inv * 0.5 * a * dv[j2 * d + k];
                    }
                }
            }
            for atom in atoms {
                maps.jump_shift(t, y, &mu, v_y, &atom.mark, &mut h_y);
                for k in 0..d {
                    y_to[k] = y[k] + h_y[k];
                }
                measure_jump_term +=
                    inv * atom.weight * field.linear_derivative_diff(t, x, cloud, y, &y_to)?;
            }
        }
    }

    // the time term, preferably through the flow derivative (which
    // equals dV/dt plus all measure terms and is far less noisy for
    // Monte Carlo fields), otherwise by a fixed-measure difference
    let eps_t = fd.eps_t.unwrap_or(0.0);
    let cv = TimeControlVariate {
        grad: &grad,
        sigma: &sigma,
        jump_values: &jump_values,
    };
    let measure_sum = measure_drift_term + measure_diffusion_term + measure_jump_term;
    let time_term = match field.flow_time_derivative(t, x, cloud, eps_t, Some(&cv))? {
        Some(along_flow) => along_flow - measure_sum,
        None => field.time_derivative(t, x, cloud, eps_t)?,
    };

    let total = time_term
        + drift_term
        + driver_term
        + jump_x_term
        + diffusion_term
        + measure_drift_term
        + measure_diffusion_term
        + measure_jump_term;
    Ok(ResidualReport {
        t,
        x: x.to_vec(),
        time_term,
        drift_term,
        driver_term,
        jump_x_term,
        diffusion_term,
        measure_drift_term,
        measure_diffusion_term,
        measure_jump_term,
        total,
        tolerance: se,
    })
}

/// True when the coefficient map writes only zeros at a handful of
/// random probe points.
fn coefficient_vanishes<F>(spec: &ProblemSpec, eval: F) -> bool
where
    F: Fn(f64, &[f64], &MeasureView, f64, &[f64], &mut [f64]),
{
    use rand::{Rng, SeedableRng};
    let d = spec.coeffs.dim;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xC0EF_2E80);
    for _ in 0..6 {
        let points: Vec<f64> = (0..4 * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let cloud = ParticleCloud::new(points, 4, d).expect("finite probe cloud");
        let mu = MeasureView::new(&cloud);
        let t = rng.gen_range(0.0..spec.horizon);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let y: f64 = rng.gen_range(-1.0..1.0);
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; d * d];
        eval(t, &x, &mu, y, &z, &mut out);
        if out.iter().any(|c| c.abs() > 1e-13) {
            return false;
        }
    }
    true
}

/// Compares stored Y values of a converged solve against fresh field
/// evaluations V(s, X_s, mu_s) at sampled (step, particle) pairs;
/// returns (max absolute deviation, max Monte Carlo tolerance).
pub fn flow_consistency(
    field: &DecouplingField,
    base: &SolutionBundle,
    pairs: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_dev = 0.0f64;
    let mut max_tol = 0.0f64;
    for _ in 0..pairs {
        // interior steps only: step 0 may be a point mass, the terminal
        // step is exact by construction
        let s = rng.gen_range(1..base.grid.steps);
        let p = rng.gen_range(0..base.paths.particles);
        let t = base.grid.node(s);
        let cloud = base.paths.cloud(s);
        let (v, se) = field.eval_v(t, base.paths.state(s, p), &cloud)?;
        max_dev = max_dev.max((v - base.backward.y_at(s, p)).abs());
        max_tol = max_tol.max(se);
    }
    Ok((max_dev, max_tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{BenchmarkFamily, FamilyId};
    use crate::picard::picard_solve;

    fn spread_cloud() -> ParticleCloud {
        ParticleCloud::new(vec![-0.9, -0.4, -0.1, 0.2, 0.3, 0.7, 1.1, 1.5], 8, 1).unwrap()
    }

    fn closed(id: FamilyId) -> ClosedFormField {
        ClosedFormField::new(BenchmarkFamily::new(id))
    }

    fn small_cfg(particles: usize, copies: usize, steps: usize) -> FieldConfig {
        FieldConfig {
            particles,
            copies,
            steps,
            seed: 11,
            ..FieldConfig::default()
        }
    }

    #[test]
    fn closed_form_fields_have_zero_residual() {
        let fd = FdSteps::default();
        let cloud = spread_cloud();
        for id in [FamilyId::A, FamilyId::B, FamilyId::C, FamilyId::Q] {
            let field = closed(id);
            let spec = field.family.problem_spec(&[0.3]);
            for &(t, x) in &[(0.0, 0.3), (0.1, -0.5), (0.2, 1.2)] {
                let r = residual(&field, &spec, t, &[x], &cloud, &fd).unwrap();
                for (name, value) in r.terms() {
                    assert!(
                        value.is_finite(),
                        "{id:?} {name} at ({t}, {x}) is not finite"
                    );
                }
                assert!(
                    r.total.abs() <= 1e-10,
                    "{id:?} residual {} at ({t}, {x})",
                    r.total
                );
            }
        }
    }

    #[test]
    fn benchmark_b_term_values_at_origin() {
        // V = x + m1 + 2 c lambda tau at the point mass in 0: the time
        // term is -2 c lambda, the x-jump and the measure-jump
        // contribute +c lambda each, everything else is zero
        let field = closed(FamilyId::B);
        let spec = field.family.problem_spec(&[0.0]);
        let cloud = ParticleCloud::dirac(&[0.0], 4).unwrap();
        let r = residual(&field, &spec, 0.0, &[0.0], &cloud, &FdSteps::default()).unwrap();
        assert!((r.time_term - (-2.0)).abs() <= 1e-12);
        assert!((r.jump_x_term - 1.0).abs() <= 1e-12);
        assert!((r.measure_jump_term - 1.0).abs() <= 1e-12);
        assert!(r.drift_term.abs() <= 1e-12);
        assert!(r.driver_term.abs() <= 1e-12);
        assert!(r.diffusion_term.abs() <= 1e-12);
        assert!(r.measure_drift_term.abs() <= 1e-12);
        assert!(r.measure_diffusion_term.abs() <= 1e-12);
        assert!(r.total.abs() <= 1e-12);
    }

    #[test]
    fn perturbed_field_is_detected() {
        let field = closed(FamilyId::B);
        let spec = field.family.problem_spec(&[0.0]);
        let cloud = spread_cloud();
        let bad = PerturbedField {
            inner: &field,
            eps: 0.2,
        };
        let r = residual(&bad, &spec, 0.1, &[0.4], &cloud, &FdSteps::default()).unwrap();
        assert!(
            (r.total - (-0.2)).abs() <= 1e-10,
            "perturbation reads {}",
            r.total
        );
    }

    #[test]
    fn residual_csv_lists_every_term() {
        let field = closed(FamilyId::A);
        let spec = field.family.problem_spec(&[0.0]);
        let cloud = spread_cloud();
        let r = residual(&field, &spec, 0.0, &[0.0], &cloud, &FdSteps::default()).unwrap();
        let mut buf = Vec::new();
        write_residual_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 8 + 1);
        for name in [
            "time",
            "drift",
            "driver",
            "jump_x",
            "diffusion",
            "measure_drift",
            "measure_diffusion",
            "measure_jump",
            "total",
        ] {
            assert!(text.contains(&format!(",{name},")), "missing {name}");
        }
    }

    #[test]
    fn monte_carlo_field_is_exact_at_terminal_time() {
        let family = BenchmarkFamily::new(FamilyId::B);
        let spec = family.problem_spec(&[0.0]);
        let field = DecouplingField::new(spec, small_cfg(64, 16, 10)).unwrap();
        let cloud = spread_cloud();
        let (v, se) = field.eval_v(0.25, &[0.7], &cloud).unwrap();
        assert_eq!(se, 0.0);
        assert!((v - family.closed_form_v(0.25, 0.7, &cloud)).abs() <= 1e-14);
    }

    #[test]
    fn monte_carlo_field_matches_benchmarks_a_and_b() {
        let fam_a = BenchmarkFamily::new(FamilyId::A);
        let field_a =
            DecouplingField::new(fam_a.problem_spec(&[0.0]), small_cfg(800, 400, 20)).unwrap();
        let cloud = ParticleCloud::dirac(&[0.0], 8).unwrap();
        let (v, _) = field_a.eval_v(0.0, &[0.0], &cloud).unwrap();
        assert!((v - 0.25).abs() <= 0.01, "A gives {v}");

        let fam_b = BenchmarkFamily::new(FamilyId::B);
        let field_b =
            DecouplingField::new(fam_b.problem_spec(&[0.0]), small_cfg(800, 400, 20)).unwrap();
        let (v, _) = field_b.eval_v(0.0, &[0.0], &cloud).unwrap();
        assert!((v - 0.5).abs() <= 0.02, "B gives {v}");
        assert!(!field_b.measure_terms_vanish());
        assert!(field_a.measure_terms_vanish());
    }

    #[test]
    fn monte_carlo_field_is_deterministic_and_cached() {
        let fam = BenchmarkFamily::new(FamilyId::A);
        let field = DecouplingField::new(fam.problem_spec(&[0.0]), small_cfg(400, 100, 10)).unwrap();
        let cloud = ParticleCloud::dirac(&[0.2], 8).unwrap();
        let (v1, s1) = field.eval_v(0.05, &[0.2], &cloud).unwrap();
        let (v2, s2) = field.eval_v(0.05, &[0.2], &cloud).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(s1.to_bits(), s2.to_bits());
        let fresh =
            DecouplingField::new(fam.problem_spec(&[0.0]), small_cfg(400, 100, 10)).unwrap();
        let (v3, _) = fresh.eval_v(0.05, &[0.2], &cloud).unwrap();
        assert_eq!(v1.to_bits(), v3.to_bits());
    }

    #[test]
    fn linear_derivative_difference_matches_benchmark_b() {
        // dV/dmu(y) = y + const for family B, so the increment over
        // (0 -> 1) is exactly 1
        let fam = BenchmarkFamily::new(FamilyId::B);
        let field = DecouplingField::new(fam.problem_spec(&[0.0]), small_cfg(600, 200, 16)).unwrap();
        let cloud = ParticleCloud::dirac(&[0.0], 8).unwrap();
        let diff = field
            .linear_derivative_diff(0.0, &[0.0], &cloud, &[0.0], &[1.0])
            .unwrap();
        assert!((diff - 1.0).abs() <= 0.05, "increment {diff}");
    }

    #[test]
    fn monte_carlo_residual_is_small_on_benchmark_a() {
        let fam = BenchmarkFamily::new(FamilyId::A);
        let spec = fam.problem_spec(&[0.0]);
        let mut cfg = small_cfg(1500, 600, 20);
        cfg.time_copies = 60_000;
        let field = DecouplingField::new(spec.clone(), cfg).unwrap();
        let cloud = ParticleCloud::dirac(&[0.0], 8).unwrap();
        let fd = FdSteps {
            subsample_cap: 4,
            ..FdSteps::default()
        };
        let r = residual(&field, &spec, 0.1, &[0.0], &cloud, &fd).unwrap();
        assert!(r.total.abs() <= 0.05, "residual {} ({:?})", r.total, r);
    }

    #[test]
    fn flow_consistency_holds_on_benchmark_a() {
        let fam = BenchmarkFamily::new(FamilyId::A);
        let spec = fam.problem_spec(&[0.3]);
        let cfg = small_cfg(1200, 8000, 20);
        let grid = TimeGrid::new(0.0, spec.horizon, cfg.steps).unwrap();
        let base = picard_solve(&spec, &grid, 6000, 5, &cfg.basis, cfg.tol, cfg.max_iter).unwrap();
        let field = DecouplingField::new(spec, cfg).unwrap();
        let (dev, _) = flow_consistency(&field, &base, 8, 99).unwrap();
        assert!(dev <= 0.03, "max deviation {dev}");
    }
}

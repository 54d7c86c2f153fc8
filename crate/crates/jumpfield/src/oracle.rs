//! Closed-form benchmark families and a brute-force Monte Carlo oracle.
//! Every reference number in the test suite is certified here before the
//! regression solvers are trusted.
//!
//! The four families share the dynamics dX = sigma dW + c dN (one jump
//! atom at mark 1 with intensity lambda) and differ in the driver and
//! terminal map. Writing tau = T - t, m1 = mean(mu), m2 = second moment:
//!
//!   A: f = 0,       g = x                 V = x + c lambda tau
//!   B: f = 0,       g = x + m1            V = x + m1 + 2 c lambda tau
//!   C: f = kappa y, g = x                 V = e^{kappa tau}(x + c lambda tau)
//!   Q: f = 0,       g = x + m2, sigma = 0
//!      V = x + c lambda tau + m2 + 2 c lambda tau m1
//!          + c^2 (lambda tau + (lambda tau)^2)
//!
//! Family Q's value: X_T = x + c Pois(lambda tau) gives E X_T =
//! x + c lambda tau, and each cloud particle y moves to y + c Pois, so
//! E int y^2 dmu_T = m2 + 2 c lambda tau m1 + c^2(lambda tau +
//! (lambda tau)^2) from the Poisson second moment. Each V satisfies the
//! master equation identically; `verify_master_identity` re-checks this
//! numerically with exact derivative formulas.

use crate::drivers::sample_noise;
use crate::error::{Error, Result};
use crate::forward::{simulate_mv, simulate_pinned, FeedbackProcesses};
use crate::drivers::TimeGrid;
use crate::measure::ParticleCloud;
use crate::model::{
    CoefficientSet, InitialLaw, JumpLinearCoeffs, JumpMeasure, MeasureView, ProblemSpec,
    TerminalKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyId {
    A,
    B,
    C,
    Q,
}

impl std::str::FromStr for FamilyId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(FamilyId::A),
            "B" | "b" => Ok(FamilyId::B),
            "C" | "c" => Ok(FamilyId::C),
            "Q" | "q" => Ok(FamilyId::Q),
            other => Err(Error::structural(format!("unknown family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BenchmarkFamily {
    pub id: FamilyId,
    /// Jump size c (h = c per event).
    pub c: f64,
    /// Jump intensity lambda.
    pub lambda: f64,
    /// Driver slope kappa (only family C has kappa != 0).
    pub kappa: f64,
    /// Horizon T.
    pub horizon: f64,
}

impl BenchmarkFamily {
    pub fn new(id: FamilyId) -> Self {
        Self {
            id,
            c: 1.0,
            lambda: 1.0,
            kappa: if id == FamilyId::C { 0.5 } else { 0.0 },
            horizon: 0.25,
        }
    }

    pub fn sigma(&self) -> f64 {
        if self.id == FamilyId::Q {
            0.0
        } else {
            1.0
        }
    }

    fn terminal_kind(&self) -> TerminalKind {
        match self.id {
            FamilyId::A | FamilyId::C => TerminalKind::State,
            FamilyId::B => TerminalKind::StatePlusMean,
            FamilyId::Q => TerminalKind::StatePlusSecondMoment,
        }
    }

    pub fn jump_measure(&self) -> JumpMeasure {
        JumpMeasure::single(1.0, self.lambda).expect("positive intensity")
    }

    pub fn problem_spec(&self, x0: &[f64]) -> ProblemSpec {
        let jump = self.jump_measure();
        let fam = JumpLinearCoeffs {
            dim: 1,
            drift_y_slope: 0.0,
            drift_mean_slope: 0.0,
            sigma_const: self.sigma(),
            jump_scale: self.c,
            driver_kappa: self.kappa,
            terminal: self.terminal_kind(),
            terminal_scale: 1.0,
        };
        let cert = fam.certificate(&jump);
        ProblemSpec {
            coeffs: CoefficientSet::new(Arc::new(fam), cert, jump).expect("atoms aligned"),
            horizon: self.horizon,
            initial_law: InitialLaw::Point { x: x0.to_vec() },
            pin: None,
        }
    }

    /// Exact decoupling field V(t, x, mu).
    pub fn closed_form_v(&self, t: f64, x: f64, cloud: &ParticleCloud) -> f64 {
        let tau = self.horizon - t;
        let clt = self.c * self.lambda * tau;
        match self.id {
            FamilyId::A => x + clt,
            FamilyId::B => x + cloud.mean()[0] + 2.0 * clt,
            FamilyId::C => (self.kappa * tau).exp() * (x + clt),
            FamilyId::Q => {
                let m1 = cloud.mean()[0];
                let m2 = cloud.second_moment()[0];
                let lt = self.lambda * tau;
                x + clt + m2 + 2.0 * clt * m1 + self.c * self.c * (lt + lt * lt)
            }
        }
    }

    /// Exact time derivative of V.
    pub fn closed_form_dt_v(&self, t: f64, x: f64, cloud: &ParticleCloud) -> f64 {
        let tau = self.horizon - t;
        let cl = self.c * self.lambda;
        match self.id {
            FamilyId::A => -cl,
            FamilyId::B => -2.0 * cl,
            FamilyId::C => {
                -(self.kappa * tau).exp() * (self.kappa * (x + cl * tau) + cl)
            }
            FamilyId::Q => {
                let m1 = cloud.mean()[0];
                -cl - 2.0 * cl * m1
                    - self.c * self.c * self.lambda * (1.0 + 2.0 * self.lambda * tau)
            }
        }
    }

    /// Exact spatial derivative dV/dx.
    pub fn closed_form_dx_v(&self, t: f64) -> f64 {
        match self.id {
            FamilyId::C => (self.kappa * (self.horizon - t)).exp(),
            _ => 1.0,
        }
    }

    /// Exact second spatial derivative (zero: all V are affine in x).
    pub fn closed_form_d2x_v(&self) -> f64 {
        0.0
    }

    /// Exact Lions derivative d_mu V(t, x, mu)(v).
    pub fn closed_form_dmu_v(&self, t: f64, v: f64) -> f64 {
        match self.id {
            FamilyId::A | FamilyId::C => 0.0,
            FamilyId::B => 1.0,
            FamilyId::Q => 2.0 * v + 2.0 * self.c * self.lambda * (self.horizon - t),
        }
    }

    /// Exact v-derivative of the Lions derivative, d_v d_mu V.
    pub fn closed_form_dv_dmu_v(&self) -> f64 {
        match self.id {
            FamilyId::Q => 2.0,
            _ => 0.0,
        }
    }

    /// Exact normalized linear derivative dV/dmu(t, x, mu)(y)
    /// (integrates to zero against mu).
    pub fn closed_form_linear_derivative(&self, t: f64, y: f64, cloud: &ParticleCloud) -> f64 {
        match self.id {
            FamilyId::A | FamilyId::C => 0.0,
            FamilyId::B => y - cloud.mean()[0],
            FamilyId::Q => {
                let m1 = cloud.mean()[0];
                let m2 = cloud.second_moment()[0];
                let clt = self.c * self.lambda * (self.horizon - t);
                (y * y - m2) + 2.0 * clt * (y - m1)
            }
        }
    }

    /// Exact martingale integrand Z = dV/dx * sigma.
    pub fn closed_form_z(&self, t: f64) -> f64 {
        self.closed_form_dx_v(t) * self.sigma()
    }

    /// Exact jump integrand H = V(x + h) - V(x) = c dV/dx.
    pub fn closed_form_h(&self, t: f64) -> f64 {
        self.c * self.closed_form_dx_v(t)
    }
}

/// Evaluates every master-equation term with the exact derivative
/// formulas at random points and returns the maximum absolute residual;
/// an identity check of the closed forms (expected ~ 0 to rounding).
pub fn verify_master_identity(family: &BenchmarkFamily, points: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let t = rng.gen_range(0.0..family.horizon);
        let x = rng.gen_range(-2.0..2.0);
        let n = rng.gen_range(2..12);
        let pts: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let cloud = ParticleCloud::new(pts.clone(), n, 1)?;

        let kappa_v = family.kappa * family.closed_form_v(t, x, &cloud);
        let dt_v = family.closed_form_dt_v(t, x, &cloud);
        // drift b = 0 for every family; diffusion is x-affine V so the
        // second-derivative term vanishes
        let x_jump = family.lambda
            * (family.closed_form_v(t, x + family.c, &cloud)
                - family.closed_form_v(t, x, &cloud));
        let mut measure_jump = 0.0;
        for &y in &pts {
            measure_jump += family.lambda
                * (family.closed_form_linear_derivative(t, y + family.c, &cloud)
                    - family.closed_form_linear_derivative(t, y, &cloud));
        }
        measure_jump /= n as f64;
        let residual = dt_v + kappa_v + x_jump + measure_jump;
        worst = worst.max(residual.abs());
    }
    Ok(worst)
}

/// Plain Monte Carlo estimate of V(t, x, mu) = e^{kappa (T-t)} E[g(X_T,
/// mu_T)] for drivers of the form f = kappa y (or zero); the independent
/// estimator the regression solvers are compared against.
pub fn brute_force_v(
    family: &BenchmarkFamily,
    t: f64,
    x: f64,
    cloud: &ParticleCloud,
    paths: usize,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if t >= family.horizon {
        let mu = MeasureView::new(cloud);
        let spec = family.problem_spec(&[x]);
        return Ok((spec.coeffs.maps.terminal(&[x], &mu), 0.0));
    }
    let spec = family.problem_spec(&[x]);
    let grid = TimeGrid::new(t, family.horizon, steps)?;
    let n = cloud.len();

    // measure flow of the cloud (forward coefficients are y-independent
    // for every oracle family, so zero feedback is exact)
    let cloud_noise = sample_noise(&grid, &spec.coeffs.jump, n, seed, 1)?;
    let fb_cloud = FeedbackProcesses::zero(n, steps, 1);
    let cloud_paths = simulate_mv(&spec, &fb_cloud, &cloud_noise, &grid, cloud)?;
    let flow = cloud_paths.flow();

    // pinned copies from x
    let pin_noise = sample_noise(&grid, &spec.coeffs.jump, paths, seed ^ 0xB0_07, 1)?;
    let fb_pin = FeedbackProcesses::zero(paths, steps, 1);
    let pinned = simulate_pinned(&spec, &flow, &fb_pin, &pin_noise, &grid, &[x])?;

    let terminal_cloud = flow.at(steps);
    let mu_t = MeasureView::new(terminal_cloud);
    let factor = (family.kappa * (family.horizon - t)).exp();
    let vals: Vec<f64> = (0..paths)
        .map(|p| factor * spec.coeffs.maps.terminal(pinned.state(steps, p), &mu_t))
        .collect();
    let mean = vals.iter().sum::<f64>() / paths as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / paths as f64;
    Ok((mean, (var / paths as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dirac0(n: usize) -> ParticleCloud {
        ParticleCloud::dirac(&[0.0], n).unwrap()
    }

    #[test]
    fn terminal_values_match_g() {
        for id in [FamilyId::A, FamilyId::B, FamilyId::C, FamilyId::Q] {
            let fam = BenchmarkFamily::new(id);
            let cloud = ParticleCloud::new(vec![-1.0, 0.5, 2.0], 3, 1).unwrap();
            let spec = fam.problem_spec(&[0.7]);
            let mu = MeasureView::new(&cloud);
            let g = spec.coeffs.maps.terminal(&[0.7], &mu);
            assert!(
                (fam.closed_form_v(fam.horizon, 0.7, &cloud) - g).abs() < 1e-14,
                "family {id:?}"
            );
        }
    }

    #[test]
    fn frozen_reference_values() {
        let a = BenchmarkFamily::new(FamilyId::A);
        assert!((a.closed_form_v(0.0, 0.0, &dirac0(1)) - 0.25).abs() < 1e-15);

        let b = BenchmarkFamily::new(FamilyId::B);
        assert!((b.closed_form_v(0.0, 0.0, &dirac0(1)) - 0.5).abs() < 1e-15);

        let c = BenchmarkFamily::new(FamilyId::C);
        let truth = 0.125f64.exp() * 1.25;
        assert!((truth - 1.416_435_566_333_532_8).abs() < 1e-12);
        assert!((c.closed_form_v(0.0, 1.0, &dirac0(1)) - truth).abs() < 1e-15);
        assert!((c.closed_form_dx_v(0.0) - 1.133_148_453_066_826).abs() < 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let eps = 1e-6;
        for id in [FamilyId::A, FamilyId::B, FamilyId::C, FamilyId::Q] {
            let fam = BenchmarkFamily::new(id);
            let cloud = ParticleCloud::new(vec![-0.4, 0.3, 1.1, 0.2], 4, 1).unwrap();
            let (t, x) = (0.07, 0.9);
            let fd_x = (fam.closed_form_v(t, x + eps, &cloud)
                - fam.closed_form_v(t, x - eps, &cloud))
                / (2.0 * eps);
            assert!((fd_x - fam.closed_form_dx_v(t)).abs() < 1e-8, "{id:?} dx");
            let fd_t = (fam.closed_form_v(t + eps, x, &cloud)
                - fam.closed_form_v(t - eps, x, &cloud))
                / (2.0 * eps);
            assert!(
                (fd_t - fam.closed_form_dt_v(t, x, &cloud)).abs() < 1e-7,
                "{id:?} dt"
            );
            // Lions derivative via push-forward: shift one atom by eps
            let v0 = fam.closed_form_v(t, x, &cloud);
            let shifted = cloud.shift_atom(2, &[eps]).unwrap();
            let fd_mu = (fam.closed_form_v(t, x, &shifted) - v0) / (eps / 4.0);
            let truth = fam.closed_form_dmu_v(t, cloud.point(2)[0]);
            assert!((fd_mu - truth).abs() < 1e-4, "{id:?} dmu: {fd_mu} vs {truth}");
        }
    }

    #[test]
    fn linear_derivative_matches_mixture_bump() {
        // raw estimator (N+1) [V(mu with y appended) - V(mu)] recovers the
        // linear derivative up to its additive constant
        for id in [FamilyId::B, FamilyId::Q] {
            let fam = BenchmarkFamily::new(id);
            let cloud = ParticleCloud::new(vec![0.0, 2.0], 2, 1).unwrap();
            let (t, x, y) = (0.1, 0.5, 1.7);
            let n1 = (cloud.len() + 1) as f64;
            let raw = n1
                * (fam.closed_form_v(t, x, &cloud.bump_add_atom(&[y]).unwrap())
                    - fam.closed_form_v(t, x, &cloud));
            // subtract the cloud average of the same raw estimator
            let mut avg = 0.0;
            for i in 0..cloud.len() {
                avg += n1
                    * (fam
                        .closed_form_v(t, x, &cloud.bump_add_atom(cloud.point(i)).unwrap())
                        - fam.closed_form_v(t, x, &cloud));
            }
            avg /= cloud.len() as f64;
            let normalized = raw - avg;
            let truth = fam.closed_form_linear_derivative(t, y, &cloud);
            assert!(
                (normalized - truth).abs() < 1e-10,
                "{id:?}: {normalized} vs {truth}"
            );
        }
    }

    #[test]
    fn master_identity_all_families() {
        for id in [FamilyId::A, FamilyId::B, FamilyId::C, FamilyId::Q] {
            let fam = BenchmarkFamily::new(id);
            let worst = verify_master_identity(&fam, 1000, 99).unwrap();
            assert!(worst <= 1e-10, "family {id:?}: residual {worst}");
        }
    }

    #[test]
    fn brute_force_constant_terminal() {
        // at t = T the estimator returns g exactly
        let fam = BenchmarkFamily::new(FamilyId::A);
        let (v, se) = brute_force_v(&fam, fam.horizon, 0.3, &dirac0(4), 10, 5, 1).unwrap();
        assert_eq!(v, 0.3);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn brute_force_matches_closed_form_a() {
        let fam = BenchmarkFamily::new(FamilyId::A);
        let cloud = dirac0(64);
        let (v, se) = brute_force_v(&fam, 0.0, 0.0, &cloud, 100_000, 25, 2).unwrap();
        let truth = fam.closed_form_v(0.0, 0.0, &cloud);
        assert!((v - truth).abs() <= 3.0 * se, "{v} vs {truth} (se {se})");
    }

    #[test]
    fn brute_force_matches_closed_form_b() {
        let fam = BenchmarkFamily::new(FamilyId::B);
        // the cloud mean term carries O(1/sqrt(N_cloud)) noise of its own,
        // so allow for both error sources
        let cloud = dirac0(4096);
        let (v, se) = brute_force_v(&fam, 0.0, 0.0, &cloud, 100_000, 25, 3).unwrap();
        let truth = fam.closed_form_v(0.0, 0.0, &cloud);
        let cloud_se = (0.5f64 / 4096.0).sqrt();
        assert!(
            (v - truth).abs() <= 3.0 * (se * se + cloud_se * cloud_se).sqrt(),
            "{v} vs {truth} (se {se})"
        );
    }

    #[test]
    fn brute_force_matches_closed_form_c() {
        let fam = BenchmarkFamily::new(FamilyId::C);
        let cloud = dirac0(64);
        let (v, se) = brute_force_v(&fam, 0.0, 1.0, &cloud, 100_000, 25, 4).unwrap();
        let truth = fam.closed_form_v(0.0, 1.0, &cloud);
        assert!((v - truth).abs() <= 3.0 * se, "{v} vs {truth} (se {se})");
    }
}

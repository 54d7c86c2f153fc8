//! Problem data: coefficient maps, the finite jump intensity measure,
//! Lipschitz/boundedness certificates, and validation of the standing
//! assumptions.

use crate::error::{Error, Result};
use crate::measure::ParticleCloud;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Finite atomic intensity measure: marks with positive weights,
/// total mass `lambda = sum of weights`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JumpMeasure {
    pub atoms: Vec<JumpAtom>,
    total_mass: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JumpAtom {
    pub mark: Vec<f64>,
    pub weight: f64,
}

impl JumpMeasure {
    pub fn new(atoms: Vec<JumpAtom>) -> Result<Self> {
        let mut mass = 0.0;
        let mark_dim = atoms.first().map(|a| a.mark.len()).unwrap_or(0);
        for a in &atoms {
            if !(a.weight > 0.0 && a.weight.is_finite()) {
                return Err(Error::structural("jump atom weight must be finite and > 0"));
            }
            if a.mark.len() != mark_dim {
                return Err(Error::structural("jump atom marks must share a dimension"));
            }
            if a.mark.iter().any(|v| !v.is_finite()) {
                return Err(Error::structural("jump atom mark must be finite"));
            }
            mass += a.weight;
        }
        Ok(Self {
            atoms,
            total_mass: mass,
        })
    }

    /// Zero-intensity measure (no jumps).
    pub fn none() -> Self {
        Self {
            atoms: Vec::new(),
            total_mass: 0.0,
        }
    }

    /// Single atom at scalar mark `mark` with weight `lambda`.
    pub fn single(mark: f64, lambda: f64) -> Result<Self> {
        Self::new(vec![JumpAtom {
            mark: vec![mark],
            weight: lambda,
        }])
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Checks total mass against the stored atoms (1e-12 slack).
    pub fn check_mass(&self) -> bool {
        let s: f64 = self.atoms.iter().map(|a| a.weight).sum();
        (s - self.total_mass).abs() <= 1e-12 * (1.0 + s.abs())
    }
}

/// Lipschitz/boundedness constants of Assumption-style conditions:
/// global constant L, exponential-moment exponent gamma, boundedness M,
/// and the per-atom constant L(theta).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzCertificate {
    pub l: f64,
    pub gamma: f64,
    pub m: f64,
    /// One entry per jump atom, aligned with `JumpMeasure::atoms`.
    pub l_theta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub pass: bool,
    pub violations: Vec<String>,
}

/// Checks the integrated jump condition
/// `sum_k (e^{gamma * L(theta_k)} - 1) * w_k <= L` and nonnegativity of
/// every declared constant.
pub fn validate_certificate(
    cert: &LipschitzCertificate,
    jump: &JumpMeasure,
) -> Result<ValidationReport> {
    if cert.l_theta.len() != jump.atom_count() {
        return Err(Error::structural(format!(
            "certificate has {} per-atom constants, jump measure has {} atoms",
            cert.l_theta.len(),
            jump.atom_count()
        )));
    }
    let mut violations = Vec::new();
    for (name, v) in [("L", cert.l), ("gamma", cert.gamma), ("M", cert.m)] {
        if !(v >= 0.0) || !v.is_finite() {
            violations.push(format!("{name} = {v} is not a finite nonnegative constant"));
        }
    }
    if !(cert.gamma > 0.0) {
        violations.push(format!("gamma = {} must be > 0", cert.gamma));
    }
    for (k, lt) in cert.l_theta.iter().enumerate() {
        if !(*lt >= 0.0) || !lt.is_finite() {
            violations.push(format!("L(theta_{k}) = {lt} is negative or non-finite"));
        }
    }
    if !jump.check_mass() {
        violations.push("jump measure total mass does not match atom weights".into());
    }
    let integral: f64 = cert
        .l_theta
        .iter()
        .zip(&jump.atoms)
        .map(|(lt, a)| ((cert.gamma * lt).exp() - 1.0) * a.weight)
        .sum();
    if integral > cert.l {
        violations.push(format!(
            "integrated jump condition violated: sum (e^(gamma L(theta)) - 1) w = {integral:.6} > L = {}",
            cert.l
        ));
    }
    Ok(ValidationReport {
        pass: violations.is_empty(),
        violations,
    })
}

/// Cloud plus precomputed summary statistics, handed to coefficient maps.
pub struct MeasureView<'a> {
    pub cloud: &'a ParticleCloud,
    pub mean: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl<'a> MeasureView<'a> {
    pub fn new(cloud: &'a ParticleCloud) -> Self {
        Self {
            mean: cloud.mean(),
            second_moment: cloud.second_moment(),
            cloud,
        }
    }
}

/// The five coefficient maps (b, sigma, h, f, g).
///
/// Outputs are written into caller-provided slices: `drift` fills a
/// d-vector, `diffusion` a row-major d x d matrix, `jump_shift` a
/// d-vector. Evaluation must be deterministic, total, and reentrant.
pub trait Coefficients: Send + Sync {
    fn dim(&self) -> usize;

    fn drift(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, z: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, out: &mut [f64]);
    fn jump_shift(
        &self,
        t: f64,
        x: &[f64],
        mu: &MeasureView,
        y: f64,
        mark: &[f64],
        out: &mut [f64],
    );
    fn driver(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, z: &[f64]) -> f64;
    fn terminal(&self, x: &[f64], mu: &MeasureView) -> f64;

    /// Closed-form first derivatives, when available. Required by the
    /// variational and measure-derivative solvers.
    fn derivatives(&self) -> Option<&dyn CoefficientDerivatives> {
        None
    }
}

/// First derivatives of the coefficient maps, all row-major:
/// `db_dx[j*d + k] = d b_j / d x_k`, `dsigma_dx[(j*d + l)*d + k] =
/// d sigma_{j,l} / d x_k`, and `dmu_*` are Lions derivatives
/// `d_mu phi(..., v)` evaluated at the probe point `v`.
#[allow(clippy::too_many_arguments)]
pub trait CoefficientDerivatives: Send + Sync {
    fn db_dx(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, z: &[f64], out: &mut [f64]);
    fn db_dy(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, z: &[f64], out: &mut [f64]);
    fn db_dz(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, z: &[f64], out: &mut [f64]);
    fn dsigma_dx(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, out: &mut [f64]);
    fn dsigma_dy(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, out: &mut [f64]);
    fn dh_dx(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, mark: &[f64], out: &mut [f64]);
    fn dh_dy(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, mark: &[f64], out: &mut [f64]);
    fn df_dx(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, z: &[f64], out: &mut [f64]);
    fn df_dy(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, z: &[f64]) -> f64;
    fn df_dz(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, z: &[f64], out: &mut [f64]);
    fn dg_dx(&self, x: &[f64], mu: &MeasureView, out: &mut [f64]);

    fn dmu_b(
        &self,
        t: f64,
        x: &[f64],
        mu: &MeasureView,
        y: f64,
        z: &[f64],
        v: &[f64],
        out: &mut [f64],
    );
    fn dmu_sigma(&self, t: f64, x: &[f64], mu: &MeasureView, y: f64, v: &[f64], out: &mut [f64]);
    fn dmu_h(
        &self,
        t: f64,
        x: &[f64],
        mu: &MeasureView,
        y: f64,
        mark: &[f64],
        v: &[f64],
        out: &mut [f64],
    );
    fn dmu_f(
        &self,
        t: f64,
        x: &[f64],
        mu: &MeasureView,
        y: f64,
        z: &[f64],
        v: &[f64],
        out: &mut [f64],
    );
    fn dmu_g(&self, x: &[f64], mu: &MeasureView, v: &[f64], out: &mut [f64]);
}

/// Coefficient maps plus their certificate and jump measure.
#[derive(Clone)]
pub struct CoefficientSet {
    pub maps: Arc<dyn Coefficients>,
    pub cert: LipschitzCertificate,
    pub jump: JumpMeasure,
    pub dim: usize,
}

impl CoefficientSet {
    pub fn new(
        maps: Arc<dyn Coefficients>,
        cert: LipschitzCertificate,
        jump: JumpMeasure,
    ) -> Result<Self> {
        let dim = maps.dim();
        if cert.l_theta.len() != jump.atom_count() {
            return Err(Error::structural(
                "certificate atom table does not match jump measure",
            ));
        }
        Ok(Self {
            maps,
            cert,
            jump,
            dim,
        })
    }

    pub fn derivatives(&self) -> Result<&dyn CoefficientDerivatives> {
        self.maps.derivatives().ok_or_else(|| {
            Error::capability("coefficient set does not provide derivative evaluators")
        })
    }
}

impl std::fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("dim", &self.dim)
            .field("atoms", &self.jump.atom_count())
            .finish()
    }
}

/// Initial law of the forward state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    Point { x: Vec<f64> },
    Gaussian { mean: Vec<f64>, std_dev: Vec<f64> },
    Atoms { points: Vec<Vec<f64>> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point { x } => x.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Atoms { points } => points.first().map(|p| p.len()).unwrap_or(0),
        }
    }
}

/// The full problem: coefficients, horizon, initial law, and an optional
/// pin point for the state-pinned system.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub coeffs: CoefficientSet,
    pub horizon: f64,
    pub initial_law: InitialLaw,
    pub pin: Option<(f64, Vec<f64>)>,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::structural("horizon must be > 0"));
        }
        if self.initial_law.dim() != self.coeffs.dim {
            return Err(Error::structural("initial law dimension mismatch"));
        }
        Ok(())
    }
}

/// Built-in benchmark coefficient families, all with closed-form
/// constants:
///
///   b(t,x,mu,y,z)   = driftYSlope * y + driftMeanSlope * mean(mu)   (per coordinate)
///   sigma           = sigmaConst * I
///   h(theta)        = jumpScale * theta      (state independent)
///   f(t,x,mu,y,z)   = driverKappa * y
///   g(x,mu)         = sum_k x_k + terminal feature of mu
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    /// g(x, mu) = sum_k x_k
    State,
    /// g(x, mu) = sum_k x_k + sum_k mean_k(mu)
    StatePlusMean,
    /// g(x, mu) = sum_k x_k + sum_k int y_k^2 mu(dy)
    StatePlusSecondMoment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JumpLinearCoeffs {
    pub dim: usize,
    pub drift_y_slope: f64,
    /// Coefficient of the cloud mean in the drift; 0.0 for the stock
    /// families.
    pub drift_mean_slope: f64,
    pub sigma_const: f64,
    pub jump_scale: f64,
    pub driver_kappa: f64,
    pub terminal: TerminalKind,
    /// Multiplier of the measure feature in g; 1.0 for the stock families.
    pub terminal_scale: f64,
}

impl JumpLinearCoeffs {
    /// Closed-form certificate for this family, given its jump measure.
    /// The coefficients do not depend on (x, mu) except through g, so
    /// L(theta) = 0 for every atom and the integrated jump condition is
    /// trivially satisfied.
    pub fn certificate(&self, jump: &JumpMeasure) -> LipschitzCertificate {
        let g_lip = match self.terminal {
            TerminalKind::State => 1.0,
            TerminalKind::StatePlusMean => 1.0_f64.max(self.terminal_scale.abs()),
            // quadratic feature: Lipschitz only on a bounded probe domain;
            // the constant below covers |y| <= 1.5
            TerminalKind::StatePlusSecondMoment => 1.0_f64.max(3.0 * self.terminal_scale.abs()),
        };
        let l = [
            self.drift_y_slope.abs(),
            self.drift_mean_slope.abs(),
            self.driver_kappa.abs(),
            g_lip,
            1.0,
        ]
        .into_iter()
        .fold(0.0, f64::max);
        let mark_norm_max = jump
            .atoms
            .iter()
            .map(|a| a.mark.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let m = self.sigma_const.abs() * (self.dim as f64).sqrt()
            + ((self.jump_scale.abs() * mark_norm_max).exp() - 1.0) * jump.total_mass();
        LipschitzCertificate {
            l,
            gamma: 1.0,
            m,
            l_theta: vec![0.0; jump.atom_count()],
        }
    }
}

impl Coefficients for JumpLinearCoeffs {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, _t: f64, _x: &[f64], mu: &MeasureView, y: f64, _z: &[f64], out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&mu.mean) {
            *o = self.drift_y_slope * y + self.drift_mean_slope * m;
        }
    }

    fn diffusion(&self, _t: f64, _x: &[f64], _mu: &MeasureView, _y: f64, out: &mut [f64]) {
        out.fill(0.0);
        for j in 0..self.dim {
            out[j * self.dim + j] = self.sigma_const;
        }
    }

    fn jump_shift(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &MeasureView,
        _y: f64,
        mark: &[f64],
        out: &mut [f64],
    ) {
        for (o, m) in out.iter_mut().zip(mark) {
            *o = self.jump_scale * m;
        }
        // scalar marks broadcast to every coordinate
        if mark.len() == 1 {
            out.fill(self.jump_scale * mark[0]);
        }
    }

    fn driver(&self, _t: f64, _x: &[f64], _mu: &MeasureView, y: f64, _z: &[f64]) -> f64 {
        self.driver_kappa * y
    }

    fn terminal(&self, x: &[f64], mu: &MeasureView) -> f64 {
        let state: f64 = x.iter().sum();
        match self.terminal {
            TerminalKind::State => state,
            TerminalKind::StatePlusMean => {
                state + self.terminal_scale * mu.mean.iter().sum::<f64>()
            }
            TerminalKind::StatePlusSecondMoment => {
                state + self.terminal_scale * mu.second_moment.iter().sum::<f64>()
            }
        }
    }

    fn derivatives(&self) -> Option<&dyn CoefficientDerivatives> {
        Some(self)
    }
}

impl CoefficientDerivatives for JumpLinearCoeffs {
    fn db_dx(&self, _t: f64, _x: &[f64], _mu: &MeasureView, _y: f64, _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn db_dy(&self, _t: f64, _x: &[f64], _mu: &MeasureView, _y: f64, _z: &[f64], out: &mut [f64]) {
        out.fill(self.drift_y_slope);
    }
    fn db_dz(&self, _t: f64, _x: &[f64], _mu: &MeasureView, _y: f64, _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn dsigma_dx(&self, _t: f64, _x: &[f64], _mu: &MeasureView, _y: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn dsigma_dy(&self, _t: f64, _x: &[f64], _mu: &MeasureView, _y: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn dh_dx(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &MeasureView,
        _y: f64,
        _mark: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
    }
    fn dh_dy(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &MeasureView,
        _y: f64,
        _mark: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
    }
    fn df_dx(&self, _t: f64, _x: &[f64], _mu: &MeasureView, _y: f64, _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn df_dy(&self, _t: f64, _x: &[f64], _mu: &MeasureView, _y: f64, _z: &[f64]) -> f64 {
        self.driver_kappa
    }
    fn df_dz(&self, _t: f64, _x: &[f64], _mu: &MeasureView, _y: f64, _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn dg_dx(&self, _x: &[f64], _mu: &MeasureView, out: &mut [f64]) {
        out.fill(1.0);
    }
    fn dmu_b(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &MeasureView,
        _y: f64,
        _z: &[f64],
        _v: &[f64],
        out: &mut [f64],
    ) {
        // d_mu b(v) = driftMeanSlope * I (the mean is linear in mu)
        out.fill(0.0);
        for j in 0..self.dim {
            out[j * self.dim + j] = self.drift_mean_slope;
        }
    }
    fn dmu_sigma(&self, _t: f64, _x: &[f64], _mu: &MeasureView, _y: f64, _v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn dmu_h(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &MeasureView,
        _y: f64,
        _mark: &[f64],
        _v: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
    }
    fn dmu_f(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &MeasureView,
        _y: f64,
        _z: &[f64],
        _v: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
    }
    fn dmu_g(&self, _x: &[f64], _mu: &MeasureView, v: &[f64], out: &mut [f64]) {
        // d_mu g(v) = d_v (dg/dmu)(v)
        match self.terminal {
            TerminalKind::State => out.fill(0.0),
            TerminalKind::StatePlusMean => out.fill(self.terminal_scale),
            TerminalKind::StatePlusSecondMoment => {
                for (o, vk) in out.iter_mut().zip(v) {
                    *o = 2.0 * self.terminal_scale * vk;
                }
            }
        }
    }
}

/// Configuration of the empirical Lipschitz spot-check.
#[derive(Debug, Clone)]
pub struct RandomProbeConfig {
    pub pairs: usize,
    pub seed: u64,
    /// Probe points are drawn uniformly in [-radius, radius]^d.
    pub radius: f64,
    /// Cloud size used for the measure argument.
    pub cloud_size: usize,
}

impl Default for RandomProbeConfig {
    fn default() -> Self {
        Self {
            pairs: 200,
            seed: 1,
            radius: 1.0,
            cloud_size: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub quotient_b: f64,
    pub quotient_sigma: f64,
    pub quotient_h: f64,
    pub quotient_f: f64,
    pub quotient_g: f64,
    /// Coefficients whose empirical quotient exceeds the declared L by >1%.
    pub flagged: Vec<String>,
}

/// Draws random argument pairs and reports the empirical difference
/// quotients |delta phi| / (|delta x| + W2 + |delta y| + |delta z|) for
/// each coefficient, flagging any that exceed the declared constant.
pub fn probe_lipschitz(coeffs: &CoefficientSet, sampler: &RandomProbeConfig) -> Result<ProbeReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sampler.seed);
    let d = coeffs.dim;
    let r = sampler.radius;
    let draw_vec = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-r..=r)).collect()
    };

    let mut q = [0.0f64; 5]; // b, sigma, h, f, g
    let mut buf1 = vec![0.0; d.max(1) * d.max(1)];
    let mut buf2 = vec![0.0; d.max(1) * d.max(1)];

    for _ in 0..sampler.pairs {
        let x1 = draw_vec(&mut rng, d);
        let x2 = draw_vec(&mut rng, d);
        let y1: f64 = rng.gen_range(-r..=r);
        let y2: f64 = rng.gen_range(-r..=r);
        let z1 = draw_vec(&mut rng, d);
        let z2 = draw_vec(&mut rng, d);
        let c1 = ParticleCloud::new(draw_vec(&mut rng, sampler.cloud_size * d), sampler.cloud_size, d)?;
        let c2 = ParticleCloud::new(draw_vec(&mut rng, sampler.cloud_size * d), sampler.cloud_size, d)?;
        let w2 = crate::measure::wasserstein2(&c1, &c2)?.distance;
        let m1 = MeasureView::new(&c1);
        let m2 = MeasureView::new(&c2);
        let t: f64 = rng.gen_range(0.0..=1.0);

        let denom = |dx: f64, dy: f64, dz: f64| dx + w2 + dy + dz;
        let dx = l2_diff(&x1, &x2);
        let dy = (y1 - y2).abs();
        let dz = l2_diff(&z1, &z2);
        let full = denom(dx, dy, dz);
        if full < 1e-9 {
            continue;
        }

        let check_finite = |out: &[f64], what: &str, input: String| -> Result<()> {
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Evaluation {
                    what: what.into(),
                    input,
                });
            }
            Ok(())
        };

        coeffs.maps.drift(t, &x1, &m1, y1, &z1, &mut buf1[..d]);
        check_finite(&buf1[..d], "drift", format!("x={x1:?}, y={y1}"))?;
        coeffs.maps.drift(t, &x2, &m2, y2, &z2, &mut buf2[..d]);
        q[0] = q[0].max(l2_diff(&buf1[..d], &buf2[..d]) / full);

        coeffs.maps.diffusion(t, &x1, &m1, y1, &mut buf1[..d * d]);
        coeffs.maps.diffusion(t, &x2, &m2, y2, &mut buf2[..d * d]);
        q[1] = q[1].max(l2_diff(&buf1[..d * d], &buf2[..d * d]) / denom(dx, dy, 0.0).max(1e-9));

        for atom in &coeffs.jump.atoms {
            coeffs.maps.jump_shift(t, &x1, &m1, y1, &atom.mark, &mut buf1[..d]);
            coeffs.maps.jump_shift(t, &x2, &m2, y2, &atom.mark, &mut buf2[..d]);
            q[2] = q[2].max(l2_diff(&buf1[..d], &buf2[..d]) / denom(dx, dy, 0.0).max(1e-9));
        }

        let f1 = coeffs.maps.driver(t, &x1, &m1, y1, &z1);
        let f2 = coeffs.maps.driver(t, &x2, &m2, y2, &z2);
        if !f1.is_finite() {
            return Err(Error::Evaluation {
                what: "driver".into(),
                input: format!("x={x1:?}, y={y1}"),
            });
        }
        q[3] = q[3].max((f1 - f2).abs() / full);

        let g1 = coeffs.maps.terminal(&x1, &m1);
        let g2 = coeffs.maps.terminal(&x2, &m2);
        q[4] = q[4].max((g1 - g2).abs() / denom(dx, 0.0, 0.0).max(1e-9));
    }

    let names = ["b", "sigma", "h", "f", "g"];
    let flagged = names
        .iter()
        .zip(&q)
        .filter(|(_, quot)| **quot > coeffs.cert.l * 1.01)
        .map(|(n, _)| n.to_string())
        .collect();
    Ok(ProbeReport {
        quotient_b: q[0],
        quotient_sigma: q[1],
        quotient_h: q[2],
        quotient_f: q[3],
        quotient_g: q[4],
        flagged,
    })
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

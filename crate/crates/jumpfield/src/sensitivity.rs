//! Linear first-order derivative FBSDE systems solved along a converged
//! base solution: the variational system in x (`solve_dx`) and the
//! measure-derivative system at a probe point v (`solve_dmu`), plus
//! finite-difference second-derivative estimators built on top of them.
//!
//! Both systems share one engine: an Euler/regression solve of a linear
//! FBSDE whose coefficients are the first derivatives of the problem
//! coefficients frozen along the base paths, driven by the same noise
//! realization (regenerated deterministically from the base seed). The
//! conditional expectations of the backward pass are regressions on the
//! augmented state (X, dX), since the derivative processes are linear in
//! dX with X-dependent loadings.

use crate::drivers::{sample_noise, NoiseBundle, TimeGrid};
use crate::error::{Error, Result};
use crate::measure::{MeasureFlow, ParticleCloud};
use crate::model::{CoefficientDerivatives, MeasureView, ProblemSpec};
use crate::picard::{picard_solve_pinned, SolutionBundle};
use crate::regression::{fit_step, RegressionBasis, StepFit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;

/// Noise streams of the copy started at the probe point v live on their
/// own salt so they are independent of both the cloud and the pinned
/// copies of the base solves.
const TILDE_SALT: u64 = 0x7E1D_E000_0000_0001;

/// Anything that evaluates like the decoupling field V(t, x, mu);
/// implemented by the closed-form benchmarks and the Monte Carlo field.
pub trait ScalarField {
    fn eval(&self, t: f64, x: &[f64], cloud: &ParticleCloud) -> Result<f64>;
}

/// Central first difference of a scalar field in x, componentwise.
pub fn fd_gradient_x(
    field: &dyn ScalarField,
    t: f64,
    x: &[f64],
    cloud: &ParticleCloud,
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::structural("finite-difference step must be > 0"));
    }
    let d = x.len();
    let mut out = vec![0.0; d];
    let mut xp = x.to_vec();
    for k in 0..d {
        xp[k] = x[k] + eps;
        let up = field.eval(t, &xp, cloud)?;
        xp[k] = x[k] - eps;
        let um = field.eval(t, &xp, cloud)?;
        xp[k] = x[k];
        out[k] = (up - um) / (2.0 * eps);
    }
    Ok(out)
}

/// Central second difference of a scalar field in x: a symmetrized d x d
/// Hessian estimate (second-order systems are not solved directly).
pub fn fd_hessian_x(
    field: &dyn ScalarField,
    t: f64,
    x: &[f64],
    cloud: &ParticleCloud,
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::structural("finite-difference step must be > 0"));
    }
    let d = x.len();
    let mut out = vec![0.0; d * d];
    let f0 = field.eval(t, x, cloud)?;
    let mut xp = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + eps;
        let up = field.eval(t, &xp, cloud)?;
        xp[j] = x[j] - eps;
        let um = field.eval(t, &xp, cloud)?;
        xp[j] = x[j];
        out[j * d + j] = (up - 2.0 * f0 + um) / (eps * eps);
        for k in (j + 1)..d {
            let mut corner = |sj: f64, sk: f64| -> Result<f64> {
                xp[j] = x[j] + sj * eps;
                xp[k] = x[k] + sk * eps;
                let v = field.eval(t, &xp, cloud);
                xp[j] = x[j];
                xp[k] = x[k];
                v
            };
            let mixed = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)?
                + corner(-1.0, -1.0)?)
                / (4.0 * eps * eps);
            out[j * d + k] = mixed;
            out[k * d + j] = mixed;
        }
    }
    Ok(out)
}

/// One direction of a linear derivative FBSDE along the base ensemble.
/// All arrays are step-major: `dx[(s*N + p)*d + k]`, `dy[s*N + p]`,
/// `dz[(s*N + p)*d + k]`, `dh[(s*N + p)*K + a]`.
#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub dz: Vec<f64>,
    pub dh: Vec<f64>,
    pub particles: usize,
    pub steps: usize,
    pub dim: usize,
    pub atoms: usize,
}

impl LinearSolution {
    #[inline]
    pub fn dx_at(&self, step: usize, p: usize) -> &[f64] {
        let base = (step * self.particles + p) * self.dim;
        &self.dx[base..base + self.dim]
    }

    #[inline]
    pub fn dy_at(&self, step: usize, p: usize) -> f64 {
        self.dy[step * self.particles + p]
    }

    /// Cross-particle mean of dY at a step.
    pub fn dy_mean(&self, step: usize) -> f64 {
        let base = step * self.particles;
        self.dy[base..base + self.particles].iter().sum::<f64>() / self.particles as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.dx
            .iter()
            .chain(&self.dy)
            .chain(&self.dz)
            .chain(&self.dh)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Solution of the variational system in x: one `LinearSolution` per
/// initial direction e_j, so the per-copy dX blocks assemble the Jacobian
/// (identity at the initial step) and `dy0` is the gradient of Y at the
/// start node.
#[derive(Debug, Clone)]
pub struct DxBundle {
    pub directions: Vec<LinearSolution>,
    /// Cross-particle mean of dY at step 0, one entry per direction:
    /// the gradient of V at the start node.
    pub dy0: Vec<f64>,
}

impl DxBundle {
    pub fn gradient(&self) -> &[f64] {
        &self.dy0
    }

    /// CSV export keyed by (t, direction): step, direction, mean dX, dY.
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, w: &mut W) -> Result<()> {
        writeln!(w, "t,direction,mean_dy")?;
        for (j, sol) in self.directions.iter().enumerate() {
            for s in 0..=sol.steps {
                writeln!(w, "{:.17e},{j},{:.17e}", grid.node(s), sol.dy_mean(s))?;
            }
        }
        Ok(())
    }
}

/// Solution of the measure-derivative system at probe point v: the
/// cloud-level linear McKean-Vlasov system (one per direction, along the
/// base cloud) and the pinned-level system for the copy at x. `dmu_y0` is
/// the Lions derivative of Y at the start node, one component per
/// direction of displacement of the test mass at v.
#[derive(Debug, Clone)]
pub struct DmuBundle {
    pub v: Vec<f64>,
    pub dmu_y0: Vec<f64>,
    pub cloud: Vec<LinearSolution>,
    pub pinned: Vec<LinearSolution>,
}

impl DmuBundle {
    /// CSV export keyed by (t, probe v).
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, w: &mut W) -> Result<()> {
        let vs = self
            .v
            .iter()
            .map(|c| format!("{c:.17e}"))
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(w, "t,v,direction,mean_dy_pinned")?;
        for (j, sol) in self.pinned.iter().enumerate() {
            for s in 0..=sol.steps {
                writeln!(
                    w,
                    "{:.17e},{vs},{j},{:.17e}",
                    grid.node(s),
                    sol.dy_mean(s)
                )?;
            }
        }
        Ok(())
    }
}

/// Tuning knobs of the measure-derivative solve.
#[derive(Debug, Clone)]
pub struct DmuConfig {
    /// Copies of the auxiliary system started at the probe point v.
    pub tilde_copies: usize,
    /// Cap on the fixed-stride subsample used for cloud averages.
    pub subsample_cap: usize,
    /// Cap on the subsample of the auxiliary copies; this average is a
    /// conditional expectation, so it needs more samples than the cloud
    /// self-interaction terms.
    pub tilde_subsample_cap: usize,
    /// Picard settings of the auxiliary pinned solve at v.
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Picard settings of the linear systems themselves.
    pub linear_tol: f64,
    pub linear_max_iter: usize,
}

impl Default for DmuConfig {
    fn default() -> Self {
        Self {
            tilde_copies: 1024,
            subsample_cap: 64,
            tilde_subsample_cap: 512,
            picard_tol: 1e-6,
            picard_max_iter: 8,
            linear_tol: 1e-10,
            linear_max_iter: 4,
        }
    }
}

/// Every `subsample_cap`-th-ish index with a fixed stride, deterministic.
pub(crate) fn subsample_indices(n: usize, cap: usize) -> Vec<usize> {
    let cap = cap.max(1);
    if n <= cap {
        return (0..n).collect();
    }
    let stride = n / cap;
    (0..cap).map(|i| i * stride).collect()
}

/// Which measure derivatives are actually nonzero, probed at a handful of
/// random points so that identically-zero source terms cost nothing.
#[derive(Debug, Clone, Copy, Default)]
struct DmuFlags {
    b: bool,
    sigma: bool,
    h: bool,
    f: bool,
    g: bool,
}

impl DmuFlags {
    fn any(&self) -> bool {
        self.b || self.sigma || self.h || self.f || self.g
    }
}

/// True when every coefficient's measure derivative vanishes at the probe
/// points (so d_mu V = 0 and all measure terms of the master equation drop);
/// false when derivatives are unavailable and nothing can be ruled out.
pub(crate) fn measure_derivatives_vanish(spec: &ProblemSpec) -> bool {
    match spec.coeffs.derivatives() {
        Ok(der) => !probe_dmu_flags(spec, der).any(),
        Err(_) => false,
    }
}

fn probe_dmu_flags(spec: &ProblemSpec, der: &dyn CoefficientDerivatives) -> DmuFlags {
    let d = spec.coeffs.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(0xD0_0D_F1A6);
    let mut flags = DmuFlags::default();
    let tol = 1e-13;
    for _ in 0..6 {
        let points: Vec<f64> = (0..4 * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let cloud = ParticleCloud::new(points, 4, d).expect("finite probe cloud");
        let mu = MeasureView::new(&cloud);
        let t = rng.gen_range(0.0..spec.horizon);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let y: f64 = rng.gen_range(-1.0..1.0);
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nonzero = |buf: &[f64]| buf.iter().any(|c| c.abs() > tol);

        let mut m = vec![0.0; d * d];
        der.dmu_b(t, &x, &mu, y, &z, &v, &mut m);
        flags.b |= nonzero(&m);
        let mut big = vec![0.0; d * d * d];
        der.dmu_sigma(t, &x, &mu, y, &v, &mut big);
        flags.sigma |= nonzero(&big);
        for atom in &spec.coeffs.jump.atoms {
            der.dmu_h(t, &x, &mu, y, &atom.mark, &v, &mut m);
            flags.h |= nonzero(&m);
        }
        let mut g = vec![0.0; d];
        der.dmu_f(t, &x, &mu, y, &z, &v, &mut g);
        flags.f |= nonzero(&g);
        der.dmu_g(&x, &mu, &v, &mut g);
        flags.g |= nonzero(&g);
    }
    flags
}

/// The cloud whose particles carry the `d_mu` self-interaction terms:
/// the system's own ensemble (the cloud-level solve) or an external,
/// already-solved cloud derivative (the pinned-level solve).
enum CloudDeriv<'a> {
    Internal,
    External {
        paths: &'a crate::forward::ForwardPaths,
        dx: &'a [f64],
    },
}

/// Source data of the measure-derivative systems for one direction: the
/// copy started at v (paths plus its x-derivative) and the cloud-level
/// derivative to average against.
struct MeasureSources<'a> {
    flags: DmuFlags,
    tilde_paths: &'a crate::forward::ForwardPaths,
    /// Stage-A dX of the copy at v for the active direction, step-major
    /// (n+1) x Mt x d.
    tilde_dx: &'a [f64],
    tilde_sub: Vec<usize>,
    cloud: CloudDeriv<'a>,
    cloud_sub: Vec<usize>,
}

/// Shared engine: solves one direction of a linear derivative FBSDE along
/// a base solution.
struct LinearEngine<'a> {
    spec: &'a ProblemSpec,
    der: &'a dyn CoefficientDerivatives,
    grid: &'a TimeGrid,
    noise: &'a NoiseBundle,
    base: &'a SolutionBundle,
    /// Frozen measure flow the base was solved against (pinned systems);
    /// None means the base paths' own empirical flow.
    flow: Option<&'a MeasureFlow>,
    basis: &'a RegressionBasis,
    tol: f64,
    max_iter: usize,
}

impl<'a> LinearEngine<'a> {
    fn particles(&self) -> usize {
        self.base.paths.particles
    }

    fn dim(&self) -> usize {
        self.spec.coeffs.dim
    }

    fn eval_cloud(&self, step: usize) -> ParticleCloud {
        match self.flow {
            Some(flow) => flow.at(step).clone(),
            None => self.base.paths.cloud(step),
        }
    }

    /// Sum over the tilde subsample and the cloud subsample of a d_mu
    /// kernel contracted against the corresponding derivative vector.
    /// `kernel(v, out)` must fill a d x d row-major matrix.
    fn dmu_average<K: Fn(&[f64], &mut [f64])>(
        &self,
        src: &MeasureSources,
        step: usize,
        own_dx: &[f64],
        kernel: K,
        out: &mut [f64],
    ) {
        let d = self.dim();
        let mut m = vec![0.0; d * d];
        // contribution of the displaced test mass at v, averaged over its
        // Monte Carlo copies
        if !src.tilde_sub.is_empty() {
            let inv = 1.0 / src.tilde_sub.len() as f64;
            for &mcopy in &src.tilde_sub {
                let v = src.tilde_paths.state(step, mcopy);
                kernel(v, &mut m);
                let dv = &src.tilde_dx
                    [(step * src.tilde_paths.particles + mcopy) * d..][..d];
                for j in 0..d {
                    for k in 0..d {
                        out[j] += inv * m[j * d + k] * dv[k];
                    }
                }
            }
        }
        // mean-field propagation through the rest of the cloud
        if !src.cloud_sub.is_empty() {
            let inv = 1.0 / src.cloud_sub.len() as f64;
            let (paths, dx): (&crate::forward::ForwardPaths, &[f64]) = match &src.cloud {
                CloudDeriv::Internal => (&self.base.paths, own_dx),
                CloudDeriv::External { paths, dx } => (paths, dx),
            };
            for &l in &src.cloud_sub {
                let v = paths.state(step, l);
                kernel(v, &mut m);
                let dv = &dx[(step * paths.particles + l) * d..][..d];
                for j in 0..d {
                    for k in 0..d {
                        out[j] += inv * m[j * d + k] * dv[k];
                    }
                }
            }
        }
    }

    /// Forward pass: Euler step of the linear SDE given (dy, dz) feedback.
    /// Returns dx, step-major (n+1) x N x d.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        dx0: &[f64],
        src: Option<&MeasureSources>,
        fb_dy: &[f64],
        fb_dz: &[f64],
    ) -> Result<Vec<f64>> {
        let np = self.particles();
        let d = self.dim();
        let n = self.grid.steps;
        let dt = self.grid.dt;
        let mut dx = vec![0.0; (n + 1) * np * d];
        for p in 0..np {
            dx[p * d..(p + 1) * d].copy_from_slice(dx0);
        }
        let atoms = &self.spec.coeffs.jump.atoms;

        for s in 0..n {
            let t = self.grid.node(s);
            let cloud = self.eval_cloud(s);
            let mu = MeasureView::new(&cloud);
            let (done, rest) = dx.split_at_mut((s + 1) * np * d);
            let cur_all: &[f64] = done; // all steps <= s, cloud self terms read step s
            let cur = &cur_all[s * np * d..];
            let next = &mut rest[..np * d];

            let bad = next
                .par_chunks_mut(d)
                .enumerate()
                .map(|(p, out)| -> std::result::Result<(), usize> {
                    let x = self.base.paths.state(s, p);
                    let yb = self.base.backward.y_at(s, p);
                    let zb = self.base.backward.z_at(s, p);
                    let dxp = &cur[p * d..(p + 1) * d];
                    let dyp = fb_dy[s * np + p];
                    let dzp = &fb_dz[(s * np + p) * d..][..d];

                    let mut mdd = vec![0.0; d * d];
                    let mut vd = vec![0.0; d];
                    let mut mdz = vec![0.0; d * d];
                    let mut sbuf = vec![0.0; d];

                    // drift
                    self.der.db_dx(t, x, &mu, yb, zb, &mut mdd);
                    self.der.db_dy(t, x, &mu, yb, zb, &mut vd);
                    self.der.db_dz(t, x, &mu, yb, zb, &mut mdz);
                    sbuf.fill(0.0);
                    if let Some(src) = src {
                        if src.flags.b {
                            self.dmu_average(
                                src,
                                s,
                                cur_all,
                                |v, m| self.der.dmu_b(t, x, &mu, yb, zb, v, m),
                                &mut sbuf,
                            );
                        }
                    }
                    for j in 0..d {
                        let mut acc = vd[j] * dyp + sbuf[j];
                        for k in 0..d {
                            acc += mdd[j * d + k] * dxp[k] + mdz[j * d + k] * dzp[k];
                        }
                        out[j] = dxp[j] + acc * dt;
                    }

                    // diffusion
                    let mut big = vec![0.0; d * d * d];
                    self.der.dsigma_dx(t, x, &mu, yb, &mut big);
                    self.der.dsigma_dy(t, x, &mu, yb, &mut mdd);
                    let mut sig_src = vec![0.0; d * d];
                    let has_sig_src = src.map(|s| s.flags.sigma).unwrap_or(false);
                    if has_sig_src {
                        // contract dmu_sigma (one d x d kernel per column l)
                        let srcref = src.unwrap();
                        let mut col = vec![0.0; d];
                        for l in 0..d {
                            col.fill(0.0);
                            self.dmu_average(
                                srcref,
                                s,
                                cur_all,
                                |v, m| {
                                    let mut full = vec![0.0; d * d * d];
                                    self.der.dmu_sigma(t, x, &mu, yb, v, &mut full);
                                    for j in 0..d {
                                        for k in 0..d {
                                            m[j * d + k] = full[(j * d + l) * d + k];
                                        }
                                    }
                                },
                                &mut col,
                            );
                            for j in 0..d {
                                sig_src[j * d + l] = col[j];
                            }
                        }
                    }
                    let dw = self.noise.dw(p, s);
                    for j in 0..d {
                        for l in 0..d {
                            let mut ds = mdd[j * d + l] * dyp;
                            if has_sig_src {
                                ds += sig_src[j * d + l];
                            }
                            for k in 0..d {
                                ds += big[(j * d + l) * d + k] * dxp[k];
                            }
                            out[j] += ds * dw[l];
                        }
                    }

                    // jumps against N(dr, dtheta), uncompensated as written
                    for &a in self.noise.jumps(p, s) {
                        let mark = &atoms[a as usize].mark;
                        self.der.dh_dx(t, x, &mu, yb, mark, &mut mdd);
                        self.der.dh_dy(t, x, &mu, yb, mark, &mut vd);
                        sbuf.fill(0.0);
                        if let Some(src) = src {
                            if src.flags.h {
                                self.dmu_average(
                                    src,
                                    s,
                                    cur_all,
                                    |v, m| self.der.dmu_h(t, x, &mu, yb, mark, v, m),
                                    &mut sbuf,
                                );
                            }
                        }
                        for j in 0..d {
                            let mut dj = vd[j] * dyp + sbuf[j];
                            for k in 0..d {
                                dj += mdd[j * d + k] * dxp[k];
                            }
                            out[j] += dj;
                        }
                    }
                    if out.iter().any(|v| !v.is_finite()) {
                        return Err(p);
                    }
                    Ok(())
                })
                .find_any(|r| r.is_err());
            if let Some(Err(p)) = bad {
                return Err(Error::Divergence {
                    step: s,
                    particle: p,
                    what: "linear forward state became non-finite".into(),
                });
            }
        }
        Ok(dx)
    }

    /// Backward pass: regression on the augmented state (X, dX).
    fn backward(
        &self,
        dx: &[f64],
        src: Option<&MeasureSources>,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let np = self.particles();
        let d = self.dim();
        let n = self.grid.steps;
        let dt = self.grid.dt;
        let k_atoms = self.spec.coeffs.jump.atom_count();
        let atoms = &self.spec.coeffs.jump.atoms;
        let maps = self.spec.coeffs.maps.as_ref();

        let aug_block = |step: usize| -> Vec<f64> {
            let mut xs = vec![0.0; np * 2 * d];
            for p in 0..np {
                xs[p * 2 * d..p * 2 * d + d].copy_from_slice(self.base.paths.state(step, p));
                xs[p * 2 * d + d..(p + 1) * 2 * d]
                    .copy_from_slice(&dx[(step * np + p) * d..][..d]);
            }
            xs
        };

        let mut dy = vec![0.0; (n + 1) * np];
        let mut dz = vec![0.0; n * np * d];
        let mut dh = vec![0.0; n * np * k_atoms];

        // terminal values: dg_dx . dX_T plus the measure-derivative source
        let term_cloud = self.eval_cloud(n);
        let term_mu = MeasureView::new(&term_cloud);
        let term: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|p| {
                let x = self.base.paths.state(n, p);
                let mut grad = vec![0.0; d];
                self.der.dg_dx(x, &term_mu, &mut grad);
                let dxp = &dx[(n * np + p) * d..][..d];
                let mut val: f64 = grad.iter().zip(dxp).map(|(g, v)| g * v).sum();
                if let Some(src) = src {
                    if src.flags.g {
                        let mut sbuf = vec![0.0; d];
                        // scalar terminal: the kernel is a 1 x d gradient,
                        // lifted to the first matrix row
                        self.dmu_average(
                            src,
                            n,
                            dx,
                            |v, m| {
                                m.fill(0.0);
                                let mut g = vec![0.0; d];
                                self.der.dmu_g(x, &term_mu, v, &mut g);
                                m[..d].copy_from_slice(&g);
                            },
                            &mut sbuf,
                        );
                        val += sbuf[0];
                    }
                }
                val
            })
            .collect();
        dy[n * np..].copy_from_slice(&term);

        let mut continuation: Vec<Option<StepFit>> = vec![None; n + 1];
        continuation[n] = Some(fit_step(self.basis, &aug_block(n), np, 2 * d, None, &[&term])?);

        for i in (0..n).rev() {
            let t = self.grid.node(i);
            let cloud = self.eval_cloud(i);
            let mu = MeasureView::new(&cloud);
            let xs = aug_block(i);
            let dy_next = dy[(i + 1) * np..(i + 2) * np].to_vec();
            let next_fit = continuation[i + 1].take().expect("filled by recursion");

            let cond = fit_step(self.basis, &xs, np, 2 * d, None, &[&dy_next])?;
            let dy_tilde: Vec<f64> = (0..np)
                .into_par_iter()
                .map(|p| cond.eval_scalar(&xs[p * 2 * d..(p + 1) * 2 * d]))
                .collect();

            let mut z_targets: Vec<Vec<f64>> = vec![vec![0.0; np]; d];
            for p in 0..np {
                let dw = self.noise.dw(p, i);
                let num = dy_next[p] - dy_tilde[p];
                for (k, zt) in z_targets.iter_mut().enumerate() {
                    zt[p] = num * dw[k] / dt;
                }
            }
            let z_refs: Vec<&[f64]> = z_targets.iter().map(|v| v.as_slice()).collect();
            let zfit = fit_step(self.basis, &xs, np, 2 * d, None, &z_refs)?;

            let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..np)
                .into_par_iter()
                .map(|p| {
                    let aug = &xs[p * 2 * d..(p + 1) * 2 * d];
                    let x = self.base.paths.state(i, p);
                    let yb = self.base.backward.y_at(i, p);
                    let zb = self.base.backward.z_at(i, p);
                    let dxp = &aug[d..];

                    let mut dzp = vec![0.0; d];
                    zfit.eval(aug, &mut dzp);

                    // dH via bumps of the next-step fit in augmented space
                    let mut dhp = vec![0.0; k_atoms];
                    let here = next_fit.eval_scalar(aug);
                    let mut bumped = vec![0.0; 2 * d];
                    let mut hshift = vec![0.0; d];
                    let mut mdd = vec![0.0; d * d];
                    let mut vd = vec![0.0; d];
                    for (a, atom) in atoms.iter().enumerate() {
                        maps.jump_shift(t, x, &mu, yb, &atom.mark, &mut hshift);
                        self.der.dh_dx(t, x, &mu, yb, &atom.mark, &mut mdd);
                        self.der.dh_dy(t, x, &mu, yb, &atom.mark, &mut vd);
                        let mut sbuf = vec![0.0; d];
                        if let Some(src) = src {
                            if src.flags.h {
                                self.dmu_average(
                                    src,
                                    i,
                                    dx,
                                    |v, m| self.der.dmu_h(t, x, &mu, yb, &atom.mark, v, m),
                                    &mut sbuf,
                                );
                            }
                        }
                        for j in 0..d {
                            bumped[j] = x[j] + hshift[j];
                            let mut dj = vd[j] * dy_tilde[p] + sbuf[j];
                            for k in 0..d {
                                dj += mdd[j * d + k] * dxp[k];
                            }
                            bumped[d + j] = dxp[j] + dj;
                        }
                        dhp[a] = next_fit.eval_scalar(&bumped) - here;
                    }

                    // linearized driver
                    let mut fx = vec![0.0; d];
                    self.der.df_dx(t, x, &mu, yb, zb, &mut fx);
                    let fy = self.der.df_dy(t, x, &mu, yb, zb);
                    let mut fz = vec![0.0; d];
                    self.der.df_dz(t, x, &mu, yb, zb, &mut fz);
                    let mut fval: f64 = fy * dy_tilde[p];
                    for k in 0..d {
                        fval += fx[k] * dxp[k] + fz[k] * dzp[k];
                    }
                    if let Some(src) = src {
                        if src.flags.f {
                            let mut sbuf = vec![0.0; d];
                            self.dmu_average(
                                src,
                                i,
                                dx,
                                |v, m| {
                                    m.fill(0.0);
                                    let mut g = vec![0.0; d];
                                    self.der.dmu_f(t, x, &mu, yb, zb, v, &mut g);
                                    m[..d].copy_from_slice(&g);
                                },
                                &mut sbuf,
                            );
                            fval += sbuf[0];
                        }
                    }
                    let target = dy_next[p] + fval * dt;
                    (dzp, dhp, target)
                })
                .collect();

            let mut targets = vec![0.0; np];
            for (p, (dzp, dhp, target)) in rows.into_iter().enumerate() {
                dz[(i * np + p) * d..(i * np + p + 1) * d].copy_from_slice(&dzp);
                dh[(i * np + p) * k_atoms..(i * np + p + 1) * k_atoms].copy_from_slice(&dhp);
                targets[p] = target;
            }
            let yfit = fit_step(self.basis, &xs, np, 2 * d, None, &[&targets])?;
            for p in 0..np {
                dy[i * np + p] = yfit.eval_scalar(&xs[p * 2 * d..(p + 1) * 2 * d]);
            }
            continuation[i] = Some(yfit);
        }

        Ok((dy, dz, dh))
    }

    /// Picard iteration of the linear system for one direction.
    fn solve_direction(
        &self,
        dx0: &[f64],
        src: Option<&MeasureSources>,
    ) -> Result<LinearSolution> {
        let np = self.particles();
        let d = self.dim();
        let n = self.grid.steps;
        let mut fb_dy = vec![0.0; (n + 1) * np];
        let mut fb_dz = vec![0.0; n * np * d];
        let mut result: Option<LinearSolution> = None;

        for _ in 0..self.max_iter {
            let dx = self.forward(dx0, src, &fb_dy, &fb_dz)?;
            let (dy, dz, dh) = self.backward(&dx, src)?;

            // solution-norm distance to the previous feedback
            let mut delta = 0.0;
            for p in 0..np {
                let mut sup = 0.0f64;
                let mut zint = 0.0;
                for s in 0..n {
                    let e = dy[s * np + p] - fb_dy[s * np + p];
                    sup = sup.max(e * e);
                    for k in 0..d {
                        let ez = dz[(s * np + p) * d + k] - fb_dz[(s * np + p) * d + k];
                        zint += ez * ez * self.grid.dt;
                    }
                }
                delta += sup + zint;
            }
            delta /= np as f64;

            fb_dy.copy_from_slice(&dy);
            fb_dz.copy_from_slice(&dz);
            result = Some(LinearSolution {
                dx,
                dy,
                dz,
                dh,
                particles: np,
                steps: n,
                dim: d,
                atoms: self.spec.coeffs.jump.atom_count(),
            });
            if delta <= self.tol {
                break;
            }
        }
        Ok(result.expect("max_iter >= 1"))
    }
}

/// Solves the variational system in x along a converged base solution:
/// dX starts at the identity (direction e_j per solve) and (dY, dZ, dH)
/// follow the linear FBSDE with derivative coefficients frozen along the
/// base paths. `dy0` is the gradient of Y at the start node.
pub fn solve_dx(
    base: &SolutionBundle,
    spec: &ProblemSpec,
    grid: &TimeGrid,
    basis: &RegressionBasis,
) -> Result<DxBundle> {
    solve_dx_with_flow(base, spec, grid, basis, None)
}

/// Same as `solve_dx` for a base that was solved against a frozen flow
/// (the pinned system): coefficients are evaluated on that flow.
pub fn solve_dx_with_flow(
    base: &SolutionBundle,
    spec: &ProblemSpec,
    grid: &TimeGrid,
    basis: &RegressionBasis,
    flow: Option<&MeasureFlow>,
) -> Result<DxBundle> {
    let der = spec.coeffs.derivatives()?;
    let d = spec.coeffs.dim;
    let noise = sample_noise(grid, &spec.coeffs.jump, base.paths.particles, base.seed, d)?;
    let engine = LinearEngine {
        spec,
        der,
        grid,
        noise: &noise,
        base,
        flow,
        basis,
        tol: 1e-12,
        max_iter: 4,
    };
    let mut directions = Vec::with_capacity(d);
    let mut dy0 = Vec::with_capacity(d);
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let sol = engine.solve_direction(&e, None)?;
        dy0.push(sol.dy_mean(0));
        directions.push(sol);
    }
    Ok(DxBundle { directions, dy0 })
}

/// Solves the measure-derivative system at probe point v. Three stages:
/// an auxiliary pinned solve started at v (the displaced test mass) with
/// its x-derivative, the cloud-level linear McKean-Vlasov system along
/// the base cloud (self-interaction terms realized as fixed-stride
/// subsample averages over the cloud itself), and the pinned-level linear
/// FBSDE for the copy at x. `dmu_y0[j]` is the Lions derivative of Y at
/// the start node for a displacement of the test mass in direction e_j.
///
/// `mv` is the converged self-interacting solution (its flow freezes the
/// measure), `pinned` the converged pinned solution at the evaluation
/// point x against that flow. `seed` keys the auxiliary copies at v;
/// reusing it across probe points gives common random numbers, which the
/// finite-difference estimator `fd_dv_dmu` relies on.
#[allow(clippy::too_many_arguments)]
pub fn solve_dmu(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    basis: &RegressionBasis,
    mv: &SolutionBundle,
    pinned: &SolutionBundle,
    v: &[f64],
    cfg: &DmuConfig,
    seed: u64,
) -> Result<DmuBundle> {
    let der = spec.coeffs.derivatives()?;
    let d = spec.coeffs.dim;
    if v.len() != d {
        return Err(Error::structural("probe point dimension mismatch"));
    }
    let flags = probe_dmu_flags(spec, der);
    if !flags.any() {
        // no coefficient depends on the measure: the derivative vanishes
        return Ok(DmuBundle {
            v: v.to_vec(),
            dmu_y0: vec![0.0; d],
            cloud: Vec::new(),
            pinned: Vec::new(),
        });
    }

    let flow = mv.flow();

    // stage A: the displaced test mass, started at v, and its x-derivative
    let tilde = picard_solve_pinned(
        spec,
        &flow,
        grid,
        v,
        cfg.tilde_copies,
        seed ^ TILDE_SALT,
        basis,
        cfg.picard_tol,
        cfg.picard_max_iter,
    )?;
    let tilde_dx = solve_dx_with_flow(&tilde, spec, grid, basis, Some(&flow))?;
    let tilde_sub = subsample_indices(cfg.tilde_copies, cfg.tilde_subsample_cap);

    let mv_noise = sample_noise(grid, &spec.coeffs.jump, mv.paths.particles, mv.seed, d)?;
    let pin_noise = sample_noise(
        grid,
        &spec.coeffs.jump,
        pinned.paths.particles,
        pinned.seed,
        d,
    )?;
    let cloud_sub = subsample_indices(mv.paths.particles, cfg.subsample_cap);

    let mut cloud_solutions = Vec::with_capacity(d);
    let mut pinned_solutions = Vec::with_capacity(d);
    let mut dmu_y0 = Vec::with_capacity(d);
    let zero = vec![0.0; d];

    for j in 0..d {
        // stage B: cloud-level system (the "x = xi" system), initial 0
        let cloud_engine = LinearEngine {
            spec,
            der,
            grid,
            noise: &mv_noise,
            base: mv,
            flow: None,
            basis,
            tol: cfg.linear_tol,
            max_iter: cfg.linear_max_iter,
        };
        let src_b = MeasureSources {
            flags,
            tilde_paths: &tilde.paths,
            tilde_dx: &tilde_dx.directions[j].dx,
            tilde_sub: tilde_sub.clone(),
            cloud: CloudDeriv::Internal,
            cloud_sub: cloud_sub.clone(),
        };
        let cloud_sol = cloud_engine.solve_direction(&zero, Some(&src_b))?;

        // stage C: pinned-level system at x, fed by stages A and B
        let pin_engine = LinearEngine {
            spec,
            der,
            grid,
            noise: &pin_noise,
            base: pinned,
            flow: Some(&flow),
            basis,
            tol: cfg.linear_tol,
            max_iter: cfg.linear_max_iter,
        };
        let src_c = MeasureSources {
            flags,
            tilde_paths: &tilde.paths,
            tilde_dx: &tilde_dx.directions[j].dx,
            tilde_sub: tilde_sub.clone(),
            cloud: CloudDeriv::External {
                paths: &mv.paths,
                dx: &cloud_sol.dx,
            },
            cloud_sub: cloud_sub.clone(),
        };
        let pin_sol = pin_engine.solve_direction(&zero, Some(&src_c))?;
        dmu_y0.push(pin_sol.dy_mean(0));
        cloud_solutions.push(cloud_sol);
        pinned_solutions.push(pin_sol);
    }

    Ok(DmuBundle {
        v: v.to_vec(),
        dmu_y0,
        cloud: cloud_solutions,
        pinned: pinned_solutions,
    })
}

/// Central difference of the Lions derivative in the probe point:
/// out[j*d + k] = d(dmu_Y)_j / d v_k. Probe points v +- eps e_k share the
/// auxiliary seed, so the difference is taken on common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn fd_dv_dmu(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    basis: &RegressionBasis,
    mv: &SolutionBundle,
    pinned: &SolutionBundle,
    v: &[f64],
    eps: f64,
    cfg: &DmuConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::structural("finite-difference step must be > 0"));
    }
    let d = spec.coeffs.dim;
    let mut out = vec![0.0; d * d];
    let mut vp = v.to_vec();
    for k in 0..d {
        vp[k] = v[k] + eps;
        let plus = solve_dmu(spec, grid, basis, mv, pinned, &vp, cfg, seed)?;
        vp[k] = v[k] - eps;
        let minus = solve_dmu(spec, grid, basis, mv, pinned, &vp, cfg, seed)?;
        vp[k] = v[k];
        for j in 0..d {
            out[j * d + k] = (plus.dmu_y0[j] - minus.dmu_y0[j]) / (2.0 * eps);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        CoefficientSet, Coefficients, InitialLaw, JumpLinearCoeffs, JumpMeasure,
        LipschitzCertificate, TerminalKind,
    };
    use crate::oracle::{BenchmarkFamily, FamilyId};
    use crate::picard::picard_solve;
    use std::sync::Arc;

    fn solve_family(
        id: FamilyId,
        x0: f64,
        particles: usize,
        steps: usize,
    ) -> (ProblemSpec, TimeGrid, SolutionBundle) {
        let fam = BenchmarkFamily::new(id);
        let spec = fam.problem_spec(&[x0]);
        let grid = TimeGrid::new(0.0, fam.horizon, steps).unwrap();
        let basis = RegressionBasis::default();
        let sol = picard_solve(&spec, &grid, particles, 7, &basis, 1e-8, 8).unwrap();
        (spec, grid, sol)
    }

    #[test]
    fn dx_benchmark_a_is_one() {
        let (spec, grid, sol) = solve_family(FamilyId::A, 0.0, 2000, 20);
        let dx = solve_dx(&sol, &spec, &grid, &RegressionBasis::default()).unwrap();
        assert!(
            (dx.gradient()[0] - 1.0).abs() <= 0.02,
            "dY(0) = {}, want 1",
            dx.gradient()[0]
        );
        // dX stays at the identity: the forward coefficients of family A
        // do not depend on x
        let sol0 = &dx.directions[0];
        for s in 0..=sol0.steps {
            assert!((sol0.dx_at(s, 17)[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dx_benchmark_c_matches_exponential_factor() {
        let (spec, grid, sol) = solve_family(FamilyId::C, 1.0, 2000, 25);
        let dx = solve_dx(&sol, &spec, &grid, &RegressionBasis::default()).unwrap();
        // frozen from exp(0.125)
        assert!(
            (dx.gradient()[0] - 1.133_148_453_066_826_3).abs() <= 0.02,
            "dY(0) = {}, want e^0.125",
            dx.gradient()[0]
        );
    }

    /// g constant, f = 0: the derivative FBSDE has zero terminal value and
    /// zero driver, so everything vanishes.
    #[derive(Debug)]
    struct FlatTerminal;

    impl Coefficients for FlatTerminal {
        fn dim(&self) -> usize {
            1
        }
        fn drift(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
        fn diffusion(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, out: &mut [f64]) {
            out.fill(1.0);
        }
        fn jump_shift(
            &self,
            _: f64,
            _: &[f64],
            _: &MeasureView,
            _: f64,
            _: &[f64],
            out: &mut [f64],
        ) {
            out.fill(1.0);
        }
        fn driver(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64]) -> f64 {
            0.0
        }
        fn terminal(&self, _: &[f64], _: &MeasureView) -> f64 {
            4.0
        }
        fn derivatives(&self) -> Option<&dyn CoefficientDerivatives> {
            Some(self)
        }
    }

    impl CoefficientDerivatives for FlatTerminal {
        fn db_dx(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64], o: &mut [f64]) {
            o.fill(0.0);
        }
        fn db_dy(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64], o: &mut [f64]) {
            o.fill(0.0);
        }
        fn db_dz(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64], o: &mut [f64]) {
            o.fill(0.0);
        }
        fn dsigma_dx(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, o: &mut [f64]) {
            o.fill(0.0);
        }
        fn dsigma_dy(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, o: &mut [f64]) {
            o.fill(0.0);
        }
        fn dh_dx(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64], o: &mut [f64]) {
            o.fill(0.0);
        }
        fn dh_dy(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64], o: &mut [f64]) {
            o.fill(0.0);
        }
        fn df_dx(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64], o: &mut [f64]) {
            o.fill(0.0);
        }
        fn df_dy(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64]) -> f64 {
            0.0
        }
        fn df_dz(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64], o: &mut [f64]) {
            o.fill(0.0);
        }
        fn dg_dx(&self, _: &[f64], _: &MeasureView, o: &mut [f64]) {
            o.fill(0.0);
        }
        fn dmu_b(
            &self,
            _: f64,
            _: &[f64],
            _: &MeasureView,
            _: f64,
            _: &[f64],
            _: &[f64],
            o: &mut [f64],
        ) {
            o.fill(0.0);
        }
        fn dmu_sigma(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64], o: &mut [f64]) {
            o.fill(0.0);
        }
        fn dmu_h(
            &self,
            _: f64,
            _: &[f64],
            _: &MeasureView,
            _: f64,
            _: &[f64],
            _: &[f64],
            o: &mut [f64],
        ) {
            o.fill(0.0);
        }
        fn dmu_f(
            &self,
            _: f64,
            _: &[f64],
            _: &MeasureView,
            _: f64,
            _: &[f64],
            _: &[f64],
            o: &mut [f64],
        ) {
            o.fill(0.0);
        }
        fn dmu_g(&self, _: &[f64], _: &MeasureView, _: &[f64], o: &mut [f64]) {
            o.fill(0.0);
        }
    }

    #[test]
    fn flat_terminal_gives_zero_derivatives() {
        let jump = JumpMeasure::single(1.0, 1.0).unwrap();
        let cert = LipschitzCertificate {
            l: 1.0,
            gamma: 1.0,
            m: 2.0,
            l_theta: vec![0.0],
        };
        let spec = ProblemSpec {
            coeffs: CoefficientSet::new(Arc::new(FlatTerminal), cert, jump).unwrap(),
            horizon: 0.25,
            initial_law: InitialLaw::Point { x: vec![0.0] },
            pin: None,
        };
        let grid = TimeGrid::new(0.0, 0.25, 10).unwrap();
        let basis = RegressionBasis::default();
        let sol = picard_solve(&spec, &grid, 500, 3, &basis, 1e-8, 6).unwrap();
        let dx = solve_dx(&sol, &spec, &grid, &basis).unwrap();
        let s = &dx.directions[0];
        let tail = s
            .dy
            .iter()
            .chain(&s.dz)
            .chain(&s.dh)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(tail < 1e-10, "dY/dZ/dH should vanish, max = {tail}");
    }

    #[test]
    fn dmu_zero_without_measure_dependence() {
        let (spec, grid, sol) = solve_family(FamilyId::A, 0.0, 800, 10);
        let flow = sol.flow();
        let basis = RegressionBasis::default();
        let pinned =
            crate::picard::picard_solve_pinned(&spec, &flow, &grid, &[0.0], 400, 7, &basis, 1e-8, 6)
                .unwrap();
        let out = solve_dmu(
            &spec,
            &grid,
            &basis,
            &sol,
            &pinned,
            &[0.4],
            &DmuConfig::default(),
            11,
        )
        .unwrap();
        assert_eq!(out.dmu_y0, vec![0.0]);
        assert!(out.cloud.is_empty() && out.pinned.is_empty());
    }

    fn dmu_setup(
        id: FamilyId,
        particles: usize,
        steps: usize,
    ) -> (ProblemSpec, TimeGrid, SolutionBundle, SolutionBundle) {
        let (spec, grid, sol) = solve_family(id, 0.0, particles, steps);
        let flow = sol.flow();
        let basis = RegressionBasis::default();
        let pinned = crate::picard::picard_solve_pinned(
            &spec, &flow, &grid, &[0.0], 500, 7, &basis, 1e-8, 6,
        )
        .unwrap();
        (spec, grid, sol, pinned)
    }

    #[test]
    fn dmu_benchmark_b_is_one_at_probes() {
        let (spec, grid, mv, pinned) = dmu_setup(FamilyId::B, 1500, 20);
        let basis = RegressionBasis::default();
        let cfg = DmuConfig::default();
        for v in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            let out = solve_dmu(&spec, &grid, &basis, &mv, &pinned, &[v], &cfg, 19).unwrap();
            assert!(
                (out.dmu_y0[0] - 1.0).abs() <= 0.05,
                "dmu_Y(v = {v}) = {}, want 1",
                out.dmu_y0[0]
            );
        }
    }

    #[test]
    fn dmu_benchmark_q_matches_closed_form() {
        let (spec, grid, mv, pinned) = dmu_setup(FamilyId::Q, 1500, 20);
        let basis = RegressionBasis::default();
        let cfg = DmuConfig {
            tilde_copies: 4096,
            tilde_subsample_cap: 2048,
            ..DmuConfig::default()
        };
        // dmu_V(0, x, mu)(v) = 2v + 2 c lambda T
        for v in [-0.5, 0.3] {
            let want = 2.0 * v + 0.5;
            let out = solve_dmu(&spec, &grid, &basis, &mv, &pinned, &[v], &cfg, 19).unwrap();
            assert!(
                (out.dmu_y0[0] - want).abs() <= 0.05 * want.abs().max(1.0),
                "dmu_Y(v = {v}) = {}, want {want}",
                out.dmu_y0[0]
            );
        }
    }

    #[test]
    fn dmu_scales_linearly_with_terminal() {
        // doubling the measure feature of g doubles dmu_Y
        let jump = JumpMeasure::single(1.0, 1.0).unwrap();
        let fam = JumpLinearCoeffs {
            dim: 1,
            drift_y_slope: 0.0,
            drift_mean_slope: 0.0,
            sigma_const: 1.0,
            jump_scale: 1.0,
            driver_kappa: 0.0,
            terminal: TerminalKind::StatePlusMean,
            terminal_scale: 2.0,
        };
        let cert = fam.certificate(&jump);
        let spec = ProblemSpec {
            coeffs: CoefficientSet::new(Arc::new(fam), cert, jump).unwrap(),
            horizon: 0.25,
            initial_law: InitialLaw::Point { x: vec![0.0] },
            pin: None,
        };
        let grid = TimeGrid::new(0.0, 0.25, 20).unwrap();
        let basis = RegressionBasis::default();
        let mv = picard_solve(&spec, &grid, 1500, 7, &basis, 1e-8, 8).unwrap();
        let flow = mv.flow();
        let pinned = crate::picard::picard_solve_pinned(
            &spec, &flow, &grid, &[0.0], 500, 7, &basis, 1e-8, 6,
        )
        .unwrap();
        let out = solve_dmu(
            &spec,
            &grid,
            &basis,
            &mv,
            &pinned,
            &[0.5],
            &DmuConfig::default(),
            19,
        )
        .unwrap();
        assert!(
            (out.dmu_y0[0] - 2.0).abs() <= 0.02 * 2.0,
            "scaled dmu_Y = {}, want 2",
            out.dmu_y0[0]
        );
    }

    #[test]
    fn dmu_mean_field_drift_matches_closed_form() {
        // b = mean(mu): the displaced test mass propagates through the
        // whole cloud, dmu_Y(0) = e^{T} - 1
        let jump = JumpMeasure::single(1.0, 1.0).unwrap();
        let fam = JumpLinearCoeffs {
            dim: 1,
            drift_y_slope: 0.0,
            drift_mean_slope: 1.0,
            sigma_const: 1.0,
            jump_scale: 1.0,
            driver_kappa: 0.0,
            terminal: TerminalKind::State,
            terminal_scale: 1.0,
        };
        let cert = fam.certificate(&jump);
        let spec = ProblemSpec {
            coeffs: CoefficientSet::new(Arc::new(fam), cert, jump).unwrap(),
            horizon: 0.25,
            initial_law: InitialLaw::Point { x: vec![0.0] },
            pin: None,
        };
        let grid = TimeGrid::new(0.0, 0.25, 25).unwrap();
        let basis = RegressionBasis::default();
        let mv = picard_solve(&spec, &grid, 1500, 7, &basis, 1e-8, 8).unwrap();
        let flow = mv.flow();
        let pinned = crate::picard::picard_solve_pinned(
            &spec, &flow, &grid, &[0.0], 500, 7, &basis, 1e-8, 6,
        )
        .unwrap();
        let out = solve_dmu(
            &spec,
            &grid,
            &basis,
            &mv,
            &pinned,
            &[0.7],
            &DmuConfig::default(),
            19,
        )
        .unwrap();
        let want = 0.25f64.exp() - 1.0;
        assert!(
            (out.dmu_y0[0] - want).abs() <= 0.02,
            "mean-field dmu_Y = {}, want {want}",
            out.dmu_y0[0]
        );
    }

    #[test]
    fn fd_dv_dmu_constant_and_quadratic() {
        let basis = RegressionBasis::default();
        // family B: dmu_V constant in v, so the v-derivative vanishes
        let (spec_b, grid_b, mv_b, pin_b) = dmu_setup(FamilyId::B, 1200, 15);
        let cfg = DmuConfig::default();
        let hess_b =
            fd_dv_dmu(&spec_b, &grid_b, &basis, &mv_b, &pin_b, &[0.2], 0.01, &cfg, 19).unwrap();
        assert!(hess_b[0].abs() <= 0.05, "d_v dmu_V on B = {}", hess_b[0]);

        // family Q: dmu_V(v) = 2v + const, so the v-derivative is 2
        let (spec_q, grid_q, mv_q, pin_q) = dmu_setup(FamilyId::Q, 1200, 15);
        let hess_q =
            fd_dv_dmu(&spec_q, &grid_q, &basis, &mv_q, &pin_q, &[0.2], 0.01, &cfg, 19).unwrap();
        assert!(
            (hess_q[0] - 2.0).abs() <= 0.2,
            "d_v dmu_V on Q = {}, want 2",
            hess_q[0]
        );
    }

    struct Quadratic;
    impl ScalarField for Quadratic {
        fn eval(&self, _t: f64, x: &[f64], _cloud: &ParticleCloud) -> Result<f64> {
            Ok(x[0] * x[0] + 0.5 * x[0])
        }
    }

    #[test]
    fn fd_hessian_exact_on_quadratic_field() {
        let cloud = ParticleCloud::dirac(&[0.0], 1).unwrap();
        let h = fd_hessian_x(&Quadratic, 0.0, &[0.3], &cloud, 1e-3).unwrap();
        assert!((h[0] - 2.0).abs() < 1e-6, "hessian = {}", h[0]);
        let g = fd_gradient_x(&Quadratic, 0.0, &[0.3], &cloud, 1e-4).unwrap();
        assert!((g[0] - 1.1).abs() < 1e-8, "gradient = {}", g[0]);
    }

    #[test]
    fn fd_rejects_nonpositive_step() {
        let cloud = ParticleCloud::dirac(&[0.0], 1).unwrap();
        assert!(fd_hessian_x(&Quadratic, 0.0, &[0.0], &cloud, 0.0).is_err());
        assert!(fd_gradient_x(&Quadratic, 0.0, &[0.0], &cloud, -1.0).is_err());
    }

    #[test]
    fn subsample_is_capped_and_strided() {
        assert_eq!(subsample_indices(5, 64), vec![0, 1, 2, 3, 4]);
        let s = subsample_indices(1000, 64);
        assert_eq!(s.len(), 64);
        assert_eq!(s[1] - s[0], 15);
        assert!(*s.last().unwrap() < 1000);
    }
}

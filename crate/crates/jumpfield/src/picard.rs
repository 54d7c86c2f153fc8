//! Fixed-point iteration of the contraction map F(y, z) = (Y, Z) on
//! common random numbers, with contraction diagnostics and checks of the
//! a-priori solution estimate.

use crate::backward::{norm_theta, solve_backward, solve_backward_with_flow, BackwardBundle};
use crate::drivers::{sample_noise, NoiseBundle, TimeGrid};
use crate::error::{Error, Result};
use crate::forward::{initial_cloud, simulate_mv, simulate_pinned, FeedbackProcesses, ForwardPaths};
use crate::measure::{wasserstein2, MeasureFlow, ParticleCloud};
use crate::model::{validate_certificate, InitialLaw, MeasureView, ProblemSpec};
use crate::regression::RegressionBasis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Noise streams for the pinned copies live on a salted seed so they are
/// independent of the cloud particles but still deterministic.
pub const PINNED_SALT: u64 = 0x70_69_6E_6E_65_64_00_01;

#[derive(Debug, Clone, Serialize)]
pub struct PicardDiagnostics {
    /// Norm of (Y, Z) differences between successive iterates, in the
    /// solution norm E[sup |dy|^2 + int |dz|^2 dt].
    pub iteration_norms: Vec<f64>,
    /// Successive quotients of iteration_norms (the empirical contraction
    /// factor theta').
    pub ratios: Vec<f64>,
    pub converged: bool,
    /// The data term I_0^2 of the a-priori estimate.
    pub i0_sq: f64,
    /// Fitted constant norm(Theta) / (E|X_0|^2 + I_0^2).
    pub apriori_c: f64,
    pub warnings: Vec<String>,
}

/// A converged forward-backward solution with its diagnostics.
pub struct SolutionBundle {
    pub paths: ForwardPaths,
    pub backward: BackwardBundle,
    pub diagnostics: PicardDiagnostics,
    pub grid: TimeGrid,
    pub seed: u64,
}

impl SolutionBundle {
    pub fn flow(&self) -> MeasureFlow {
        self.paths.flow()
    }

    /// Cross-particle average of Y at step 0 and a conservative standard
    /// error. The level error of the backward recursion is driven by the
    /// sample mean of the terminal values, so the terminal spread over
    /// sqrt(N) is the right scale.
    pub fn value_at_start(&self) -> (f64, f64) {
        let np = self.backward.particles;
        let mean0: f64 = (0..np).map(|p| self.backward.y_at(0, p)).sum::<f64>() / np as f64;
        let last = self.backward.steps;
        let vals: Vec<f64> = (0..np).map(|p| self.backward.y_at(last, p)).collect();
        let m: f64 = vals.iter().sum::<f64>() / np as f64;
        let var: f64 = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / np as f64;
        (mean0, (var / np as f64).sqrt())
    }
}

/// Solution-norm distance between two path-indexed feedback pairs:
/// E[sup_s |dy|^2 + sum_s |dz|^2 dt].
pub fn norm_yz_diff(
    a: &FeedbackProcesses,
    b: &FeedbackProcesses,
    particles: usize,
    steps: usize,
    dim: usize,
    dt: f64,
) -> f64 {
    let (ya, za) = match a {
        FeedbackProcesses::PathIndexed { y, z } => (y, z),
        _ => panic!("norm_yz_diff requires path-indexed feedback"),
    };
    let (yb, zb) = match b {
        FeedbackProcesses::PathIndexed { y, z } => (y, z),
        _ => panic!("norm_yz_diff requires path-indexed feedback"),
    };
    let mut total = 0.0;
    for p in 0..particles {
        let mut sup_y = 0.0f64;
        let mut z_int = 0.0;
        for s in 0..steps {
            let dy = ya[p * steps + s] - yb[p * steps + s];
            sup_y = sup_y.max(dy * dy);
            for k in 0..dim {
                let dz = za[(p * steps + s) * dim + k] - zb[(p * steps + s) * dim + k];
                z_int += dz * dz * dt;
            }
        }
        total += sup_y + z_int;
    }
    total / particles as f64
}

/// The data term of the a-priori estimate, evaluated at (x, y, z) = 0 and
/// mu = delta_0 by rectangle-rule quadrature over the grid.
pub fn i0_squared(spec: &ProblemSpec, grid: &TimeGrid) -> f64 {
    let d = spec.coeffs.dim;
    let zero = vec![0.0; d];
    let dirac = ParticleCloud::dirac(&zero, 1).expect("unit dirac cloud");
    let mu = MeasureView::new(&dirac);
    let maps = spec.coeffs.maps.as_ref();
    let mut acc = 0.0;
    let mut b = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    let mut hshift = vec![0.0; d];
    for s in 0..grid.steps {
        let t = grid.node(s);
        maps.drift(t, &zero, &mu, 0.0, &zero, &mut b);
        maps.diffusion(t, &zero, &mu, 0.0, &mut sigma);
        let f = maps.driver(t, &zero, &mu, 0.0, &zero);
        let mut h_sq = 0.0;
        for atom in &spec.coeffs.jump.atoms {
            maps.jump_shift(t, &zero, &mu, 0.0, &atom.mark, &mut hshift);
            h_sq += atom.weight * hshift.iter().map(|v| v * v).sum::<f64>();
        }
        acc += (b.iter().map(|v| v * v).sum::<f64>()
            + sigma.iter().map(|v| v * v).sum::<f64>()
            + f * f
            + h_sq)
            * grid.dt;
    }
    let g = maps.terminal(&zero, &mu);
    acc + g * g
}

fn fill_diagnostics(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    initial: &ParticleCloud,
    paths: &ForwardPaths,
    backward: &BackwardBundle,
    norms: Vec<f64>,
    converged: bool,
    warnings: Vec<String>,
) -> PicardDiagnostics {
    let ratios: Vec<f64> = norms.windows(2).map(|w| w[1] / w[0].max(1e-300)).collect();
    let i0_sq = i0_squared(spec, grid);
    let ex0_sq: f64 = initial.second_moment().iter().sum();
    let theta = norm_theta(paths, backward, &spec.coeffs.jump, grid);
    PicardDiagnostics {
        iteration_norms: norms,
        ratios,
        converged,
        i0_sq,
        apriori_c: theta / (ex0_sq + i0_sq).max(1e-300),
        warnings,
    }
}

/// Core Picard loop, parameterized over the forward simulation so the
/// self-interacting and pinned variants share one implementation.
fn picard_loop<F>(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &NoiseBundle,
    frozen_flow: Option<&MeasureFlow>,
    basis: &RegressionBasis,
    tol: f64,
    max_iter: usize,
    simulate: F,
) -> Result<(ForwardPaths, BackwardBundle, Vec<f64>, bool, Vec<String>)>
where
    F: Fn(&FeedbackProcesses) -> Result<ForwardPaths>,
{
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::structural("tol must be > 0 and maxIter >= 1"));
    }
    let n = noise.particles;
    let d = spec.coeffs.dim;
    let mut feedback = FeedbackProcesses::zero(n, grid.steps, d);
    let mut norms: Vec<f64> = Vec::new();
    let mut warnings = Vec::new();
    let mut last: Option<(ForwardPaths, BackwardBundle)> = None;

    for iter in 1..=max_iter {
        let paths = simulate(&feedback)?;
        let backward = solve_backward_with_flow(&spec.coeffs, &paths, frozen_flow, noise, grid, basis)?;
        let next = backward.to_feedback();
        let delta = norm_yz_diff(&feedback, &next, n, grid.steps, d, grid.dt);
        norms.push(delta);
        if norms.len() >= 2 {
            let ratio = delta / norms[norms.len() - 2].max(1e-300);
            if ratio >= 1.0 && delta > tol {
                warnings.push(format!(
                    "iteration {iter}: ratio {ratio:.4} >= 1 (no contraction observed)"
                ));
            }
        }
        last = Some((paths, backward));
        if delta <= tol {
            let (paths, backward) = last.unwrap();
            return Ok((paths, backward, norms, true, warnings));
        }
        feedback = next;
    }

    // maxIter reached: error out only when the tail ratios show no
    // contraction at all (the fixed point is only guaranteed for small T)
    let tail_ratios: Vec<f64> = norms
        .windows(2)
        .rev()
        .take(2)
        .map(|w| w[1] / w[0].max(1e-300))
        .collect();
    if tail_ratios.len() == 2 && tail_ratios.iter().all(|r| *r >= 1.0) {
        return Err(Error::NonContraction {
            ratio: tail_ratios[0],
            iterations: max_iter,
        });
    }
    let (paths, backward) = last.unwrap();
    warnings.push(format!(
        "maxIter {max_iter} reached with last norm {:.3e} > tol {tol:.3e}",
        norms.last().unwrap()
    ));
    Ok((paths, backward, norms, false, warnings))
}

/// Solves the MV-FBSDE by Picard iteration from (y, z) = 0, reusing one
/// noise bundle across iterations (common random numbers).
pub fn picard_solve(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    particles: usize,
    seed: u64,
    basis: &RegressionBasis,
    tol: f64,
    max_iter: usize,
) -> Result<SolutionBundle> {
    spec.validate()?;
    let report = validate_certificate(&spec.coeffs.cert, &spec.coeffs.jump)?;
    if !report.pass {
        return Err(Error::structural(format!(
            "certificate validation failed: {}",
            report.violations.join("; ")
        )));
    }
    let noise = sample_noise(grid, &spec.coeffs.jump, particles, seed, spec.coeffs.dim)?;
    let initial = initial_cloud(&spec.initial_law, particles, seed)?;
    picard_solve_with_noise(spec, grid, &noise, &initial, basis, tol, max_iter)
}

/// Same as `picard_solve` but against caller-provided noise and initial
/// cloud (for CRN comparisons across perturbed problems).
pub fn picard_solve_with_noise(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &NoiseBundle,
    initial: &ParticleCloud,
    basis: &RegressionBasis,
    tol: f64,
    max_iter: usize,
) -> Result<SolutionBundle> {
    let (paths, backward, norms, converged, warnings) = picard_loop(
        spec,
        grid,
        noise,
        None,
        basis,
        tol,
        max_iter,
        |fb| simulate_mv(spec, fb, noise, grid, initial),
    )?;
    let diagnostics =
        fill_diagnostics(spec, grid, initial, &paths, &backward, norms, converged, warnings);
    Ok(SolutionBundle {
        paths,
        backward,
        diagnostics,
        grid: *grid,
        seed: noise.seed,
    })
}

/// Solves the pinned system: M iid copies started at x against the frozen
/// measure flow of a converged MV solution.
pub fn picard_solve_pinned(
    spec: &ProblemSpec,
    flow: &MeasureFlow,
    grid: &TimeGrid,
    x: &[f64],
    copies: usize,
    seed: u64,
    basis: &RegressionBasis,
    tol: f64,
    max_iter: usize,
) -> Result<SolutionBundle> {
    let noise = sample_noise(
        grid,
        &spec.coeffs.jump,
        copies,
        seed ^ PINNED_SALT,
        spec.coeffs.dim,
    )?;
    let initial = ParticleCloud::dirac(x, copies)?;
    let (paths, backward, norms, converged, warnings) = picard_loop(
        spec,
        grid,
        &noise,
        Some(flow),
        basis,
        tol,
        max_iter,
        |fb| simulate_pinned(spec, flow, fb, &noise, grid, x),
    )?;
    let diagnostics =
        fill_diagnostics(spec, grid, &initial, &paths, &backward, norms, converged, warnings);
    Ok(SolutionBundle {
        paths,
        backward,
        diagnostics,
        grid: *grid,
        seed: noise.seed,
    })
}

/// Empirical contraction factors of the map F on random bounded feedback
/// pairs, all coupled to the same noise realization.
pub fn contraction_probe(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    particles: usize,
    seed: u64,
    basis: &RegressionBasis,
    pairs: usize,
) -> Result<Vec<f64>> {
    let d = spec.coeffs.dim;
    let noise = sample_noise(grid, &spec.coeffs.jump, particles, seed, d)?;
    let initial = initial_cloud(&spec.initial_law, particles, seed)?;
    let apply_f = |fb: &FeedbackProcesses| -> Result<FeedbackProcesses> {
        let paths = simulate_mv(spec, fb, &noise, grid, &initial)?;
        let bundle = solve_backward(&spec.coeffs, &paths, &noise, grid, basis)?;
        Ok(bundle.to_feedback())
    };
    let mut ratios = Vec::with_capacity(pairs);
    for j in 0..pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xC0_47_AC_7 + j as u64));
        let draw = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect()
        };
        let f1 = FeedbackProcesses::PathIndexed {
            y: draw(&mut rng, particles * grid.steps),
            z: draw(&mut rng, particles * grid.steps * d),
        };
        let f2 = FeedbackProcesses::PathIndexed {
            y: draw(&mut rng, particles * grid.steps),
            z: draw(&mut rng, particles * grid.steps * d),
        };
        let input_norm = norm_yz_diff(&f1, &f2, particles, grid.steps, d, grid.dt);
        let out1 = apply_f(&f1)?;
        let out2 = apply_f(&f2)?;
        let output_norm = norm_yz_diff(&out1, &out2, particles, grid.steps, d, grid.dt);
        ratios.push(output_norm / input_norm.max(1e-300));
    }
    Ok(ratios)
}

/// A perturbation of the evaluation point of V(0, x, mu).
#[derive(Debug, Clone)]
pub enum Perturbation {
    /// Shift the pin point x, holding the measure flow fixed.
    ShiftPin(Vec<f64>),
    /// Shift every initial-law particle (push-forward by a translation),
    /// holding the pin point fixed.
    ShiftLaw(Vec<f64>),
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuityRow {
    pub dx: f64,
    pub w2: f64,
    pub delta_v: f64,
    pub quotient: f64,
}

/// Re-solves the system under perturbed pin points / initial laws on
/// common random numbers and reports the empirical Lipschitz quotients
/// |dV| / (|dx| + W2).
#[allow(clippy::too_many_arguments)]
pub fn continuity_probe(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    particles: usize,
    copies: usize,
    seed: u64,
    basis: &RegressionBasis,
    tol: f64,
    max_iter: usize,
    perturbations: &[Perturbation],
) -> Result<Vec<ContinuityRow>> {
    let d = spec.coeffs.dim;
    let x_base: Vec<f64> = match (&spec.pin, &spec.initial_law) {
        (Some((_, x)), _) => x.clone(),
        (None, InitialLaw::Point { x }) => x.clone(),
        _ => vec![0.0; d],
    };
    let noise = sample_noise(grid, &spec.coeffs.jump, particles, seed, d)?;
    let base_initial = initial_cloud(&spec.initial_law, particles, seed)?;
    let base = picard_solve_with_noise(spec, grid, &noise, &base_initial, basis, tol, max_iter)?;
    let base_flow = base.flow();
    let base_pinned = picard_solve_pinned(
        spec, &base_flow, grid, &x_base, copies, seed, basis, tol, max_iter,
    )?;
    let (v_base, _) = base_pinned.value_at_start();

    let mut rows = Vec::with_capacity(perturbations.len());
    for pert in perturbations {
        let (dx, w2, v_pert) = match pert {
            Perturbation::ShiftPin(delta) => {
                let x_new: Vec<f64> = x_base.iter().zip(delta).map(|(a, b)| a + b).collect();
                let pinned = picard_solve_pinned(
                    spec, &base_flow, grid, &x_new, copies, seed, basis, tol, max_iter,
                )?;
                let (v, _) = pinned.value_at_start();
                let dx = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                (dx, 0.0, v)
            }
            Perturbation::ShiftLaw(delta) => {
                let shifted = base_initial.shift_all(delta)?;
                let w2 = wasserstein2(&base_initial, &shifted)?.distance;
                let solved =
                    picard_solve_with_noise(spec, grid, &noise, &shifted, basis, tol, max_iter)?;
                let flow = solved.flow();
                let pinned = picard_solve_pinned(
                    spec, &flow, grid, &x_base, copies, seed, basis, tol, max_iter,
                )?;
                let (v, _) = pinned.value_at_start();
                (0.0, w2, v)
            }
        };
        let delta_v = (v_pert - v_base).abs();
        let denom = dx + w2;
        rows.push(ContinuityRow {
            dx,
            w2,
            delta_v,
            quotient: if denom > 0.0 { delta_v / denom } else { 0.0 },
        });
    }
    Ok(rows)
}

//! Backward-in-time regression solve of the BSDE with jumps along given
//! forward paths, producing (Y, Z, H) processes and per-step continuation
//! value functions.

use crate::drivers::{NoiseBundle, TimeGrid};
use crate::error::{Error, Result};
use crate::forward::{FeedbackProcesses, ForwardPaths};
use crate::measure::MeasureFlow;
use crate::model::{CoefficientSet, JumpMeasure, MeasureView};
use crate::regression::{fit_step, BasisKind, RegressionBasis, StepFit};
use rayon::prelude::*;
use std::io::Write;

pub use crate::regression::{BasisKind as RegressionBasisKind, RegressionBasis as Basis};

/// Backward solution along a path ensemble. All arrays are step-major:
/// `y[(s * N + p)]`, `z[(s * N + p) * d + k]`, `h[(s * N + p) * K + k]`.
#[derive(Debug, Clone)]
pub struct BackwardBundle {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub h: Vec<f64>,
    /// Fitted value function per step (index 0..=n); entry i approximates
    /// x -> Y at step i.
    pub continuation: Vec<StepFit>,
    /// Fitted x -> Z per step (index 0..n).
    pub z_fits: Vec<StepFit>,
    pub particles: usize,
    pub steps: usize,
    pub dim: usize,
    pub atoms: usize,
}

impl BackwardBundle {
    #[inline]
    pub fn y_at(&self, step: usize, p: usize) -> f64 {
        self.y[step * self.particles + p]
    }

    #[inline]
    pub fn z_at(&self, step: usize, p: usize) -> &[f64] {
        let base = (step * self.particles + p) * self.dim;
        &self.z[base..base + self.dim]
    }

    #[inline]
    pub fn h_at(&self, step: usize, p: usize) -> &[f64] {
        let base = (step * self.particles + p) * self.atoms;
        &self.h[base..base + self.atoms]
    }

    /// Repackages (Y, Z) as a PathIndexed feedback pair for the next
    /// Picard iteration (particle-major layout).
    pub fn to_feedback(&self) -> FeedbackProcesses {
        let (n, np, d) = (self.steps, self.particles, self.dim);
        let mut y = vec![0.0; np * n];
        let mut z = vec![0.0; np * n * d];
        for p in 0..np {
            for s in 0..n {
                y[p * n + s] = self.y_at(s, p);
                z[(p * n + s) * d..(p * n + s + 1) * d].copy_from_slice(self.z_at(s, p));
            }
        }
        FeedbackProcesses::PathIndexed { y, z }
    }

    /// CSV export: step, particle, y, z components, h components.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let zh = (0..self.dim)
            .map(|k| format!("z{k}"))
            .chain((0..self.atoms).map(|k| format!("h{k}")))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(w, "step,particle,y,{zh}")?;
        for s in 0..=self.steps {
            for p in 0..self.particles {
                let mut row = format!("{s},{p},{:.17e}", self.y_at(s, p));
                if s < self.steps {
                    for v in self.z_at(s, p) {
                        row.push_str(&format!(",{v:.17e}"));
                    }
                    for v in self.h_at(s, p) {
                        row.push_str(&format!(",{v:.17e}"));
                    }
                } else {
                    for _ in 0..self.dim + self.atoms {
                        row.push_str(",0");
                    }
                }
                writeln!(w, "{row}")?;
            }
        }
        Ok(())
    }
}

/// Solves the backward recursion along `paths`, with the measure argument
/// taken from the paths' own empirical flow.
pub fn solve_backward(
    coeffs: &CoefficientSet,
    paths: &ForwardPaths,
    noise: &NoiseBundle,
    grid: &TimeGrid,
    basis: &RegressionBasis,
) -> Result<BackwardBundle> {
    solve_backward_with_flow(coeffs, paths, None, noise, grid, basis)
}

/// Same recursion but with the measure argument frozen to an external
/// flow (the pinned system of the decoupling field).
pub fn solve_backward_with_flow(
    coeffs: &CoefficientSet,
    paths: &ForwardPaths,
    frozen_flow: Option<&MeasureFlow>,
    noise: &NoiseBundle,
    grid: &TimeGrid,
    basis: &RegressionBasis,
) -> Result<BackwardBundle> {
    let n = grid.steps;
    let np = paths.particles;
    let d = paths.dim;
    let k_atoms = coeffs.jump.atom_count();
    if noise.particles != np || noise.steps != n || paths.steps != n {
        return Err(Error::structural("paths/noise/grid shape mismatch"));
    }
    if let Some(flow) = frozen_flow {
        if flow.steps() != n {
            return Err(Error::structural("frozen flow does not match grid"));
        }
    }

    let mut y = vec![0.0; (n + 1) * np];
    let mut z = vec![0.0; n * np * d];
    let mut h = vec![0.0; n * np * k_atoms];
    let mut continuation: Vec<Option<StepFit>> = vec![None; n + 1];
    let mut z_fits: Vec<Option<StepFit>> = vec![None; n];

    let maps = coeffs.maps.as_ref();

    // terminal values are exact, not fitted
    {
        let own_cloud;
        let cloud = match frozen_flow {
            Some(flow) => flow.at(n),
            None => {
                own_cloud = paths.cloud(n);
                &own_cloud
            }
        };
        let mu = MeasureView::new(cloud);
        let term: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|p| maps.terminal(paths.state(n, p), &mu))
            .collect();
        y[n * np..(n + 1) * np].copy_from_slice(&term);
        let center = center_for(basis, &mu);
        continuation[n] = Some(fit_step(
            basis,
            paths.step_block(n),
            np,
            d,
            center.as_deref(),
            &[&term],
        )?);
    }

    for i in (0..n).rev() {
        let t = grid.node(i);
        let own_cloud;
        let cloud = match frozen_flow {
            Some(flow) => flow.at(i),
            None => {
                own_cloud = paths.cloud(i);
                &own_cloud
            }
        };
        let mu = MeasureView::new(cloud);
        let xs = paths.step_block(i);
        let center = center_for(basis, &mu);
        let y_next = y[(i + 1) * np..(i + 2) * np].to_vec();
        // value function fitted at step i+1; used for the jump bumps, where
        // a same-step fit would degenerate when X_i has no spread (e.g. a
        // point-mass initial law at i = 0)
        let next_fit = continuation[i + 1].as_ref().expect("filled by recursion");

        // conditional-expectation fit of Y_{i+1} given X_i
        let cond = fit_step(basis, xs, np, d, center.as_deref(), &[&y_next])?;
        let y_tilde: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|p| cond.eval_scalar(paths.state(i, p)))
            .collect();

        // Z targets with the conditional mean as control variate
        let mut z_targets: Vec<Vec<f64>> = vec![vec![0.0; np]; d];
        for p in 0..np {
            let dw = noise.dw(p, i);
            let num = y_next[p] - y_tilde[p];
            for (k, zt) in z_targets.iter_mut().enumerate() {
                zt[p] = num * dw[k] / grid.dt;
            }
        }
        let z_refs: Vec<&[f64]> = z_targets.iter().map(|v| v.as_slice()).collect();
        let zfit = fit_step(basis, xs, np, d, center.as_deref(), &z_refs)?;

        // per-particle Z, H, and the Y target of the step fit
        let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..np)
            .into_par_iter()
            .map(|p| {
                let x = paths.state(i, p);
                let mut zp = vec![0.0; d];
                zfit.eval(x, &mut zp);
                let base_val = next_fit.eval_scalar(x);
                let mut hp = vec![0.0; k_atoms];
                let mut shift = vec![0.0; d];
                let mut bump = vec![0.0; d];
                for (k, atom) in coeffs.jump.atoms.iter().enumerate() {
                    maps.jump_shift(t, x, &mu, y_tilde[p], &atom.mark, &mut shift);
                    for j in 0..d {
                        bump[j] = x[j] + shift[j];
                    }
                    hp[k] = next_fit.eval_scalar(&bump) - base_val;
                }
                // one implicit pass: f evaluated at the fitted
                // continuation value
                let f = maps.driver(t, x, &mu, y_tilde[p], &zp);
                let target = y_next[p] + f * grid.dt;
                (zp, hp, target)
            })
            .collect();

        let mut targets = vec![0.0; np];
        for (p, (zp, hp, target)) in rows.into_iter().enumerate() {
            z[(i * np + p) * d..(i * np + p + 1) * d].copy_from_slice(&zp);
            h[(i * np + p) * k_atoms..(i * np + p + 1) * k_atoms].copy_from_slice(&hp);
            targets[p] = target;
        }

        let yfit = fit_step(basis, xs, np, d, center.as_deref(), &[&targets])?;
        let y_row: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|p| yfit.eval_scalar(paths.state(i, p)))
            .collect();
        y[i * np..(i + 1) * np].copy_from_slice(&y_row);
        continuation[i] = Some(yfit);
        z_fits[i] = Some(zfit);
    }

    Ok(BackwardBundle {
        y,
        z,
        h,
        continuation: continuation.into_iter().map(Option::unwrap).collect(),
        z_fits: z_fits.into_iter().map(Option::unwrap).collect(),
        particles: np,
        steps: n,
        dim: d,
        atoms: k_atoms,
    })
}

fn center_for(basis: &RegressionBasis, mu: &MeasureView) -> Option<Vec<f64>> {
    match basis.kind {
        BasisKind::Polynomial(_) => None,
        BasisKind::PolynomialPlusCloudMean(_) => Some(mu.mean.clone()),
    }
}

/// Monte Carlo estimate of the solution norm
/// `E[sup|X|^2 + sup|Y|^2 + int |Z|^2 dt + int int |H|^2 nu(dtheta) dt]`.
pub fn norm_theta(
    paths: &ForwardPaths,
    bundle: &BackwardBundle,
    jump: &JumpMeasure,
    grid: &TimeGrid,
) -> f64 {
    let np = paths.particles;
    let d = paths.dim;
    let mut total = 0.0;
    for p in 0..np {
        let mut sup_x = 0.0f64;
        let mut sup_y = 0.0f64;
        let mut z_int = 0.0;
        let mut h_int = 0.0;
        for s in 0..=paths.steps {
            let x = paths.state(s, p);
            sup_x = sup_x.max(x.iter().map(|v| v * v).sum());
            let yv = bundle.y_at(s, p);
            sup_y = sup_y.max(yv * yv);
            if s < paths.steps {
                let zv = bundle.z_at(s, p);
                z_int += zv.iter().map(|v| v * v).sum::<f64>() * grid.dt;
                let hv = bundle.h_at(s, p);
                for (k, atom) in jump.atoms.iter().enumerate() {
                    h_int += atom.weight * hv[k] * hv[k] * grid.dt;
                }
                let _ = d;
            }
        }
        total += sup_x + sup_y + z_int + h_int;
    }
    total / np as f64
}

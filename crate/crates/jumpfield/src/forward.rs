//! Euler simulation of the McKean-Vlasov forward SDE with jumps, given
//! (y, z) feedback processes — the inner SDE of the contraction map.

use crate::drivers::{NoiseBundle, TimeGrid};
use crate::error::{Error, Result};
use crate::measure::{MeasureFlow, ParticleCloud};
use crate::model::{InitialLaw, MeasureView, ProblemSpec};
use crate::regression::StepFit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;

/// The (y, z) input pair of the contraction map.
#[derive(Debug, Clone)]
pub enum FeedbackProcesses {
    /// Per-particle, per-step values: y is (particles x steps), z is
    /// (particles x steps x d), both row-major.
    PathIndexed { y: Vec<f64>, z: Vec<f64> },
    /// Per-step fitted functions x -> y and x -> z (d outputs).
    StateFeedback {
        y_fits: Vec<StepFit>,
        z_fits: Vec<StepFit>,
    },
}

impl FeedbackProcesses {
    /// The zero pair, the canonical Picard starting point.
    pub fn zero(particles: usize, steps: usize, dim: usize) -> Self {
        FeedbackProcesses::PathIndexed {
            y: vec![0.0; particles * steps],
            z: vec![0.0; particles * steps * dim],
        }
    }

}

/// Simulated forward particle system: states is (steps+1) x N x d,
/// step-major so each step's cloud is one contiguous block.
#[derive(Debug, Clone)]
pub struct ForwardPaths {
    states: Vec<f64>,
    pub particles: usize,
    pub steps: usize,
    pub dim: usize,
}

impl ForwardPaths {
    #[inline]
    pub fn state(&self, step: usize, p: usize) -> &[f64] {
        let base = (step * self.particles + p) * self.dim;
        &self.states[base..base + self.dim]
    }

    /// The full step block as a slice (N x d row-major).
    pub fn step_block(&self, step: usize) -> &[f64] {
        let base = step * self.particles * self.dim;
        &self.states[base..base + self.particles * self.dim]
    }

    pub fn cloud(&self, step: usize) -> ParticleCloud {
        ParticleCloud::new(self.step_block(step).to_vec(), self.particles, self.dim)
            .expect("simulated states are finite")
    }

    pub fn flow(&self) -> MeasureFlow {
        MeasureFlow::new((0..=self.steps).map(|s| self.cloud(s)).collect())
            .expect("at least the initial cloud exists")
    }

    /// CSV export: step, particle, coordinates.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "step,particle,{}",
            (0..self.dim)
                .map(|k| format!("x{k}"))
                .collect::<Vec<_>>()
                .join(",")
        )?;
        for s in 0..=self.steps {
            for p in 0..self.particles {
                let coords = self
                    .state(s, p)
                    .iter()
                    .map(|v| format!("{v:.17e}"))
                    .collect::<Vec<_>>()
                    .join(",");
                writeln!(w, "{s},{p},{coords}")?;
            }
        }
        Ok(())
    }
}

const INITIAL_LAW_SALT: u64 = 0x5EED_1A11_0000_0001;

/// Deterministic sample of N particles from the initial law.
pub fn initial_cloud(law: &InitialLaw, n: usize, seed: u64) -> Result<ParticleCloud> {
    let dim = law.dim();
    if dim == 0 || n == 0 {
        return Err(Error::structural("initial law needs dim >= 1 and N >= 1"));
    }
    let mut points = Vec::with_capacity(n * dim);
    match law {
        InitialLaw::Point { x } => {
            for _ in 0..n {
                points.extend_from_slice(x);
            }
        }
        InitialLaw::Gaussian { mean, std_dev } => {
            if std_dev.len() != dim {
                return Err(Error::structural("Gaussian law mean/std length mismatch"));
            }
            for p in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ INITIAL_LAW_SALT ^ (p as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                for k in 0..dim {
                    let u: f64 = rng.sample(rand_distr::StandardNormal);
                    points.push(mean[k] + std_dev[k] * u);
                }
            }
        }
        InitialLaw::Atoms { points: atoms } => {
            if atoms.is_empty() {
                return Err(Error::structural("atom list must be nonempty"));
            }
            if atoms.len() == n {
                for a in atoms {
                    points.extend_from_slice(a);
                }
            } else if n % atoms.len() == 0 {
                for a in atoms.iter().cycle().take(n) {
                    points.extend_from_slice(a);
                }
            } else {
                for p in 0..n {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        seed ^ INITIAL_LAW_SALT ^ (p as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    );
                    let idx = rng.gen_range(0..atoms.len());
                    points.extend_from_slice(&atoms[idx]);
                }
            }
        }
    }
    ParticleCloud::new(points, n, dim)
}

enum FlowSource<'a> {
    SelfInteracting,
    Frozen(&'a MeasureFlow),
}

/// Shared Euler stepper. With `FlowSource::SelfInteracting` the measure
/// argument at each step is the empirical law of the simulated particles;
/// with a frozen flow the particles are independent copies.
fn euler_simulate(
    spec: &ProblemSpec,
    feedback: &FeedbackProcesses,
    noise: &NoiseBundle,
    grid: &TimeGrid,
    initial: &ParticleCloud,
    flow_source: FlowSource,
) -> Result<ForwardPaths> {
    let n = noise.particles;
    let d = spec.coeffs.dim;
    let steps = grid.steps;
    if noise.steps != steps || noise.dim != d {
        return Err(Error::structural("noise bundle does not match grid/problem"));
    }
    if initial.len() != n || initial.dim() != d {
        return Err(Error::structural("initial cloud does not match noise size"));
    }
    if let FeedbackProcesses::PathIndexed { y, z } = feedback {
        if y.len() != n * steps || z.len() != n * steps * d {
            return Err(Error::structural("path-indexed feedback shape mismatch"));
        }
    }

    let mut states = vec![0.0; (steps + 1) * n * d];
    states[..n * d].copy_from_slice(initial.points());

    let maps = spec.coeffs.maps.as_ref();
    let atoms = &spec.coeffs.jump.atoms;

    for s in 0..steps {
        let t = grid.node(s);
        let (cur, next) = {
            let (a, b) = states.split_at_mut((s + 1) * n * d);
            (&a[s * n * d..], &mut b[..n * d])
        };
        // cloud of the current step (self-interacting) or frozen flow entry
        let own_cloud;
        let cloud: &ParticleCloud = match &flow_source {
            FlowSource::SelfInteracting => {
                own_cloud = ParticleCloud::new(cur.to_vec(), n, d)?;
                &own_cloud
            }
            FlowSource::Frozen(flow) => {
                if flow.steps() != steps {
                    return Err(Error::structural("frozen flow does not match grid"));
                }
                flow.at(s)
            }
        };
        let mu = MeasureView::new(cloud);

        let failure = next
            .par_chunks_mut(d)
            .enumerate()
            .map(|(p, out)| -> std::result::Result<(), (usize, usize)> {
                let x = &cur[p * d..(p + 1) * d];
                let mut zbuf = vec![0.0; d];
                let y = match feedback {
                    FeedbackProcesses::PathIndexed { y, z } => {
                        zbuf.copy_from_slice(&z[(p * steps + s) * d..(p * steps + s + 1) * d]);
                        y[p * steps + s]
                    }
                    FeedbackProcesses::StateFeedback { y_fits, z_fits } => {
                        z_fits[s].eval(x, &mut zbuf);
                        y_fits[s].eval_scalar(x)
                    }
                };
                let mut drift = vec![0.0; d];
                maps.drift(t, x, &mu, y, &zbuf, &mut drift);
                let mut sigma = vec![0.0; d * d];
                maps.diffusion(t, x, &mu, y, &mut sigma);
                let dw = noise.dw(p, s);
                for j in 0..d {
                    let mut v = x[j] + drift[j] * grid.dt;
                    for l in 0..d {
                        v += sigma[j * d + l] * dw[l];
                    }
                    out[j] = v;
                }
                // jumps applied after drift/diffusion, with the step-start
                // state in h (left-limit convention)
                let mut shift = vec![0.0; d];
                for &k in noise.jumps(p, s) {
                    maps.jump_shift(t, x, &mu, y, &atoms[k as usize].mark, &mut shift);
                    for j in 0..d {
                        out[j] += shift[j];
                    }
                }
                if out.iter().any(|v| !v.is_finite()) {
                    return Err((s, p));
                }
                Ok(())
            })
            .find_any(|r| r.is_err());
        if let Some(Err((step, particle))) = failure {
            return Err(Error::Divergence {
                step,
                particle,
                what: "forward state became non-finite".into(),
            });
        }
    }

    Ok(ForwardPaths {
        states,
        particles: n,
        steps,
        dim: d,
    })
}

/// Simulates the self-interacting particle system: the measure argument at
/// each step is the empirical cloud of all particles at that step.
pub fn simulate_mv(
    spec: &ProblemSpec,
    feedback: &FeedbackProcesses,
    noise: &NoiseBundle,
    grid: &TimeGrid,
    initial: &ParticleCloud,
) -> Result<ForwardPaths> {
    euler_simulate(spec, feedback, noise, grid, initial, FlowSource::SelfInteracting)
}

/// Simulates M iid copies pinned at x against a frozen measure flow
/// (no self-interaction).
pub fn simulate_pinned(
    spec: &ProblemSpec,
    frozen_flow: &MeasureFlow,
    feedback: &FeedbackProcesses,
    noise: &NoiseBundle,
    grid: &TimeGrid,
    x: &[f64],
) -> Result<ForwardPaths> {
    let initial = ParticleCloud::dirac(x, noise.particles)?;
    euler_simulate(
        spec,
        feedback,
        noise,
        grid,
        &initial,
        FlowSource::Frozen(frozen_flow),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::sample_noise;
    use crate::model::{
        CoefficientSet, Coefficients, JumpLinearCoeffs, JumpMeasure, LipschitzCertificate,
        TerminalKind,
    };
    use std::sync::Arc;

    /// b, sigma constant; h = jump_scale * mark; f = 0; g = x.
    struct ConstCoeffs {
        b: f64,
        sigma: f64,
        jump: f64,
    }
    impl Coefficients for ConstCoeffs {
        fn dim(&self) -> usize {
            1
        }
        fn drift(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64], out: &mut [f64]) {
            out[0] = self.b;
        }
        fn diffusion(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, out: &mut [f64]) {
            out[0] = self.sigma;
        }
        fn jump_shift(
            &self,
            _: f64,
            _: &[f64],
            _: &MeasureView,
            _: f64,
            mark: &[f64],
            out: &mut [f64],
        ) {
            out[0] = self.jump * mark[0];
        }
        fn driver(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64]) -> f64 {
            0.0
        }
        fn terminal(&self, x: &[f64], _: &MeasureView) -> f64 {
            x[0]
        }
    }

    fn spec_with(maps: Arc<dyn Coefficients>, jump: JumpMeasure, horizon: f64) -> ProblemSpec {
        let cert = LipschitzCertificate {
            l: 1.0,
            gamma: 1.0,
            m: 1.0,
            l_theta: vec![0.0; jump.atom_count()],
        };
        ProblemSpec {
            coeffs: CoefficientSet::new(maps, cert, jump).unwrap(),
            horizon,
            initial_law: InitialLaw::Point { x: vec![0.0] },
            pin: None,
        }
    }

    #[test]
    fn pure_jump_increments_by_count() {
        let jump = JumpMeasure::single(1.0, 1.0).unwrap();
        let spec = spec_with(
            Arc::new(ConstCoeffs {
                b: 0.0,
                sigma: 0.0,
                jump: 1.0,
            }),
            jump.clone(),
            1.0,
        );
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let noise = sample_noise(&grid, &jump, 200, 17, 1).unwrap();
        let initial = initial_cloud(&spec.initial_law, 200, 17).unwrap();
        let fb = FeedbackProcesses::zero(200, 10, 1);
        let paths = simulate_mv(&spec, &fb, &noise, &grid, &initial).unwrap();
        for p in 0..200 {
            let mut count = 0usize;
            for s in 0..10 {
                count += noise.jumps(p, s).len();
                assert_eq!(paths.state(s + 1, p)[0], count as f64);
            }
        }
    }

    #[test]
    fn deterministic_drift_integrates_exactly() {
        // b = 1, sigma = 0, h = 0, x0 = 0, T = 1 -> X_n = 1 exactly
        let spec = spec_with(
            Arc::new(ConstCoeffs {
                b: 1.0,
                sigma: 0.0,
                jump: 0.0,
            }),
            JumpMeasure::none(),
            1.0,
        );
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let noise = sample_noise(&grid, &JumpMeasure::none(), 50, 3, 1).unwrap();
        let initial = initial_cloud(&spec.initial_law, 50, 3).unwrap();
        let fb = FeedbackProcesses::zero(50, 16, 1);
        let paths = simulate_mv(&spec, &fb, &noise, &grid, &initial).unwrap();
        for p in 0..50 {
            assert!((paths.state(16, p)[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn benchmark_a_terminal_mean() {
        // b=0, sigma=1, h(theta)=theta with nu={(1, 1)}, x0=0, T=0.25:
        // E X_T = c lambda T = 0.25
        let jump = JumpMeasure::single(1.0, 1.0).unwrap();
        let fam = JumpLinearCoeffs {
            dim: 1,
            drift_y_slope: 0.0,
            drift_mean_slope: 0.0,
            sigma_const: 1.0,
            jump_scale: 1.0,
            driver_kappa: 0.0,
            terminal: TerminalKind::State,
            terminal_scale: 1.0,
        };
        let spec = spec_with(Arc::new(fam), jump.clone(), 0.25);
        let grid = TimeGrid::new(0.0, 0.25, 25).unwrap();
        let n = 100_000;
        let noise = sample_noise(&grid, &jump, n, 9, 1).unwrap();
        let initial = initial_cloud(&spec.initial_law, n, 9).unwrap();
        let fb = FeedbackProcesses::zero(n, 25, 1);
        let paths = simulate_mv(&spec, &fb, &noise, &grid, &initial).unwrap();
        let mean = paths.cloud(25).mean()[0];
        assert!((mean - 0.25).abs() <= 0.01, "terminal mean {mean}");
    }

    #[test]
    fn jump_free_coefficients_ignore_jump_noise() {
        // with h = 0 the output must not depend on the jump part of the bundle
        let jump = JumpMeasure::single(1.0, 2.0).unwrap();
        let spec = spec_with(
            Arc::new(ConstCoeffs {
                b: 0.5,
                sigma: 1.0,
                jump: 0.0,
            }),
            jump.clone(),
            0.5,
        );
        let grid = TimeGrid::new(0.0, 0.5, 8).unwrap();
        let with_jumps = sample_noise(&grid, &jump, 100, 4, 1).unwrap();
        let without = sample_noise(&grid, &JumpMeasure::none(), 100, 4, 1).unwrap();
        let initial = initial_cloud(&spec.initial_law, 100, 4).unwrap();
        let fb = FeedbackProcesses::zero(100, 8, 1);
        let a = simulate_mv(&spec, &fb, &with_jumps, &grid, &initial).unwrap();
        // jump-measure metadata differs, so step against the jump-free spec
        let spec2 = spec_with(
            Arc::new(ConstCoeffs {
                b: 0.5,
                sigma: 1.0,
                jump: 0.0,
            }),
            JumpMeasure::none(),
            0.5,
        );
        let b = simulate_mv(&spec2, &fb, &without, &grid, &initial).unwrap();
        for p in 0..100 {
            for s in 0..=8 {
                assert_eq!(a.state(s, p), b.state(s, p));
            }
        }
    }

    #[test]
    fn pinned_copies_constant_without_dynamics() {
        let spec = spec_with(
            Arc::new(ConstCoeffs {
                b: 0.0,
                sigma: 0.0,
                jump: 0.0,
            }),
            JumpMeasure::none(),
            1.0,
        );
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let noise = sample_noise(&grid, &JumpMeasure::none(), 20, 8, 1).unwrap();
        let frozen = MeasureFlow::new(
            (0..=5)
                .map(|_| ParticleCloud::dirac(&[0.0], 4).unwrap())
                .collect(),
        )
        .unwrap();
        let fb = FeedbackProcesses::zero(20, 5, 1);
        let paths = simulate_pinned(&spec, &frozen, &fb, &noise, &grid, &[2.5]).unwrap();
        for p in 0..20 {
            for s in 0..=5 {
                assert_eq!(paths.state(s, p)[0], 2.5);
            }
        }
    }

    #[test]
    fn pinned_benchmark_b_mean() {
        // Benchmark B dynamics, x = 0: copy mean of X_T = c lambda T
        let jump = JumpMeasure::single(1.0, 1.0).unwrap();
        let fam = JumpLinearCoeffs {
            dim: 1,
            drift_y_slope: 0.0,
            drift_mean_slope: 0.0,
            sigma_const: 1.0,
            jump_scale: 1.0,
            driver_kappa: 0.0,
            terminal: TerminalKind::StatePlusMean,
            terminal_scale: 1.0,
        };
        let spec = spec_with(Arc::new(fam), jump.clone(), 0.25);
        let grid = TimeGrid::new(0.0, 0.25, 25).unwrap();
        let m = 20_000;
        let noise = sample_noise(&grid, &jump, m, 31, 1).unwrap();
        let frozen = MeasureFlow::new(
            (0..=25)
                .map(|_| ParticleCloud::dirac(&[0.0], 8).unwrap())
                .collect(),
        )
        .unwrap();
        let fb = FeedbackProcesses::zero(m, 25, 1);
        let paths = simulate_pinned(&spec, &frozen, &fb, &noise, &grid, &[0.0]).unwrap();
        let mean = paths.cloud(25).mean()[0];
        assert!((mean - 0.25).abs() <= 0.02, "pinned mean {mean}");
    }

    #[test]
    fn divergence_is_reported_with_location() {
        struct Exploding;
        impl Coefficients for Exploding {
            fn dim(&self) -> usize {
                1
            }
            fn drift(
                &self,
                _: f64,
                _: &[f64],
                _: &MeasureView,
                _: f64,
                _: &[f64],
                out: &mut [f64],
            ) {
                out[0] = f64::INFINITY;
            }
            fn diffusion(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, out: &mut [f64]) {
                out[0] = 0.0;
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
                out[0] = 0.0;
            }
            fn driver(&self, _: f64, _: &[f64], _: &MeasureView, _: f64, _: &[f64]) -> f64 {
                0.0
            }
            fn terminal(&self, x: &[f64], _: &MeasureView) -> f64 {
                x[0]
            }
        }
        let spec = spec_with(Arc::new(Exploding), JumpMeasure::none(), 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 3).unwrap();
        let noise = sample_noise(&grid, &JumpMeasure::none(), 5, 1, 1).unwrap();
        let initial = initial_cloud(&spec.initial_law, 5, 1).unwrap();
        let fb = FeedbackProcesses::zero(5, 3, 1);
        let err = simulate_mv(&spec, &fb, &noise, &grid, &initial).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }));
    }

    #[test]
    fn initial_cloud_variants() {
        let point = initial_cloud(&InitialLaw::Point { x: vec![1.0, 2.0] }, 3, 0).unwrap();
        assert_eq!(point.point(2), &[1.0, 2.0]);

        let gauss_law = InitialLaw::Gaussian {
            mean: vec![5.0],
            std_dev: vec![0.1],
        };
        let g1 = initial_cloud(&gauss_law, 1000, 42).unwrap();
        let g2 = initial_cloud(&gauss_law, 1000, 42).unwrap();
        assert_eq!(g1.points(), g2.points());
        assert!((g1.mean()[0] - 5.0).abs() < 0.02);

        let atoms = InitialLaw::Atoms {
            points: vec![vec![0.0], vec![1.0]],
        };
        let a = initial_cloud(&atoms, 4, 0).unwrap();
        assert_eq!(a.mean()[0], 0.5);
    }
}

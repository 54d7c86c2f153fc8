//! Seeded Brownian increments and Poisson-random-measure events on a time
//! grid, shared across Picard iterations (common random numbers).

use crate::error::{Error, Result};
use crate::model::JumpMeasure;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use std::io::{Read, Write};

/// Uniform grid t0 = tau_0 < ... < tau_n = T with dt = (T - t0)/n.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t0 < t_end) || steps == 0 {
            return Err(Error::structural(format!(
                "time grid requires t0 < T and steps >= 1, got [{t0}, {t_end}] with {steps} steps"
            )));
        }
        let dt = (t_end - t0) / steps as f64;
        debug_assert!((dt * steps as f64 - (t_end - t0)).abs() <= 1e-12 * (t_end - t0));
        Ok(Self {
            t0,
            t_end,
            steps,
            dt,
        })
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.steps {
            self.t_end
        } else {
            self.t0 + i as f64 * self.dt
        }
    }

    /// Absolute index of the grid node on the global lattice of spacing dt.
    /// Grids that share dt and lattice-aligned endpoints also share noise on
    /// overlapping steps, which keeps time-shifted evaluations on common
    /// random numbers.
    pub fn global_step(&self, i: usize) -> i64 {
        (self.t0 / self.dt).round() as i64 + i as i64
    }
}

/// Per-particle, per-step Brownian increments and jump-mark lists.
///
/// Brownian increments are stored flat, row-major over (particle, step,
/// coordinate). Jump events are stored compressed: `jump_offsets` has one
/// entry per (particle, step) cell plus one, and `jump_atoms[a..b]` holds
/// the atom indices of the events in that cell.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    pub seed: u64,
    pub particles: usize,
    pub steps: usize,
    pub dim: usize,
    pub t0: f64,
    pub dt: f64,
    pub lambda: f64,
    pub atom_count: usize,
    pub brownian: Vec<f64>,
    pub jump_offsets: Vec<u64>,
    pub jump_atoms: Vec<u16>,
}

impl NoiseBundle {
    /// Brownian increment of particle `p` over step `s` (a d-vector).
    #[inline]
    pub fn dw(&self, p: usize, s: usize) -> &[f64] {
        let base = (p * self.steps + s) * self.dim;
        &self.brownian[base..base + self.dim]
    }

    /// Atom indices of the jump events hitting particle `p` during step `s`.
    #[inline]
    pub fn jumps(&self, p: usize, s: usize) -> &[u16] {
        let cell = p * self.steps + s;
        let a = self.jump_offsets[cell] as usize;
        let b = self.jump_offsets[cell + 1] as usize;
        &self.jump_atoms[a..b]
    }

    pub fn total_jump_count(&self) -> u64 {
        *self.jump_offsets.last().unwrap_or(&0)
    }
}

/// splitmix64 finalizer; mixes (seed, particle, global step) into one
/// stream key so that every (particle, step) cell has its own counter-based
/// RNG stream regardless of thread schedule.
fn stream_key(seed: u64, particle: u64, global_step: i64) -> u64 {
    let mut x = seed
        ^ particle.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (global_step as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    for _ in 0..2 {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

/// Draws Brownian increments N(0, dt I) and per-step Poisson(lambda dt)
/// jump events with marks distributed as nu / lambda. Deterministic in
/// (grid, jump, N, seed) and independent of thread count.
pub fn sample_noise(
    grid: &TimeGrid,
    jump: &JumpMeasure,
    particles: usize,
    seed: u64,
    dim: usize,
) -> Result<NoiseBundle> {
    if particles == 0 {
        return Err(Error::structural("particle count must be >= 1"));
    }
    if jump.atom_count() > u16::MAX as usize {
        return Err(Error::structural("too many jump atoms (max 65535)"));
    }
    let lambda = jump.total_mass();
    let nu_dt = lambda * grid.dt;
    let cum_weights: Vec<f64> = jump
        .atoms
        .iter()
        .scan(0.0, |acc, a| {
            *acc += a.weight;
            Some(*acc)
        })
        .collect();
    let sqrt_dt = grid.dt.sqrt();

    struct ParticleNoise {
        dw: Vec<f64>,
        counts: Vec<u32>,
        atoms: Vec<u16>,
    }

    let per_particle: Vec<ParticleNoise> = (0..particles)
        .into_par_iter()
        .map(|p| {
            let mut dw = Vec::with_capacity(grid.steps * dim);
            let mut counts = Vec::with_capacity(grid.steps);
            let mut atoms = Vec::new();
            for s in 0..grid.steps {
                let key = stream_key(seed, p as u64, grid.global_step(s));
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                for _ in 0..dim {
                    let u: f64 = rng.sample(rand_distr::StandardNormal);
                    dw.push(u * sqrt_dt);
                }
                let count = if nu_dt > 0.0 {
                    Poisson::new(nu_dt).expect("positive rate").sample(&mut rng) as u32
                } else {
                    0
                };
                counts.push(count);
                for _ in 0..count {
                    let u: f64 = rng.gen_range(0.0..lambda);
                    let k = cum_weights.partition_point(|&c| c <= u);
                    atoms.push(k.min(jump.atom_count() - 1) as u16);
                }
            }
            ParticleNoise { dw, counts, atoms }
        })
        .collect();

    // sequential assembly keeps layout independent of the parallel schedule
    let mut brownian = Vec::with_capacity(particles * grid.steps * dim);
    let mut jump_offsets = Vec::with_capacity(particles * grid.steps + 1);
    let mut jump_atoms = Vec::new();
    jump_offsets.push(0u64);
    for pn in &per_particle {
        brownian.extend_from_slice(&pn.dw);
        let mut cursor = 0usize;
        for &c in &pn.counts {
            cursor += c as usize;
            jump_offsets.push(jump_offsets.last().unwrap() + c as u64);
        }
        debug_assert_eq!(cursor, pn.atoms.len());
        jump_atoms.extend_from_slice(&pn.atoms);
    }

    Ok(NoiseBundle {
        seed,
        particles,
        steps: grid.steps,
        dim,
        t0: grid.t0,
        dt: grid.dt,
        lambda,
        atom_count: jump.atom_count(),
        brownian,
        jump_offsets,
        jump_atoms,
    })
}

/// Mean over particles of the compensated counting integral
/// `int int 1 Ntilde(ds, dtheta)` = (total count - lambda (T - t0) N) / N.
/// Zero in expectation.
pub fn compensated_integral_check(bundle: &NoiseBundle, jump: &JumpMeasure) -> Result<f64> {
    if jump.atom_count() != bundle.atom_count
        || (jump.total_mass() - bundle.lambda).abs() > 1e-12 * (1.0 + bundle.lambda)
    {
        return Err(Error::structural(
            "jump measure does not match the one the bundle was sampled from",
        ));
    }
    let horizon = bundle.dt * bundle.steps as f64;
    let total = bundle.total_jump_count() as f64;
    Ok((total - bundle.lambda * horizon * bundle.particles as f64) / bundle.particles as f64)
}

const DUMP_MAGIC: u64 = 0x4A46_4E4F_4953_4531; // "JFNOISE1"

impl NoiseBundle {
    /// Little-endian binary dump: header {magic, seed, n, N, d, atom count,
    /// t0, dt, lambda}, then the dense Brownian array, the jump offsets,
    /// and the jump atom indices.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for v in [
            DUMP_MAGIC,
            self.seed,
            self.steps as u64,
            self.particles as u64,
            self.dim as u64,
            self.atom_count as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [self.t0, self.dt, self.lambda] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.brownian {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.jump_offsets {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.jump_atoms {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        if read_u64(&mut r)? != DUMP_MAGIC {
            return Err(Error::structural("not a noise bundle dump"));
        }
        let seed = read_u64(&mut r)?;
        let steps = read_u64(&mut r)? as usize;
        let particles = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let atom_count = read_u64(&mut r)? as usize;
        let mut f64buf = [0u8; 8];
        let mut read_f64 = |r: &mut R| -> Result<f64> {
            r.read_exact(&mut f64buf)?;
            Ok(f64::from_le_bytes(f64buf))
        };
        let t0 = read_f64(&mut r)?;
        let dt = read_f64(&mut r)?;
        let lambda = read_f64(&mut r)?;
        let mut brownian = vec![0.0; particles * steps * dim];
        let mut buf = [0u8; 8];
        for v in brownian.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let mut jump_offsets = vec![0u64; particles * steps + 1];
        for v in jump_offsets.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = u64::from_le_bytes(buf);
        }
        let total = *jump_offsets.last().unwrap() as usize;
        let mut jump_atoms = vec![0u16; total];
        let mut buf2 = [0u8; 2];
        for v in jump_atoms.iter_mut() {
            r.read_exact(&mut buf2)?;
            *v = u16::from_le_bytes(buf2);
        }
        Ok(Self {
            seed,
            particles,
            steps,
            dim,
            t0,
            dt,
            lambda,
            atom_count,
            brownian,
            jump_offsets,
            jump_atoms,
        })
    }
}

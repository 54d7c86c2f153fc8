//! Least-squares machinery for conditional-expectation estimation:
//! per-step polynomial bases, standardized design matrices, and a
//! multi-right-hand-side ridge solve.

use crate::error::{Error, Result};

/// Basis family for per-step regressions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BasisKind {
    /// Monomials in x up to the given total degree.
    Polynomial(usize),
    /// Same monomials evaluated in x - mean(cloud); the cloud mean enters
    /// the fitted function as the centering point, so continuation values
    /// track the measure argument through its first moment.
    PolynomialPlusCloudMean(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    /// Ridge weight per sample: the normal equations use
    /// (X'X + ridge * samples * I).
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            kind: BasisKind::Polynomial(3),
            ridge: 1e-8,
        }
    }
}

impl RegressionBasis {
    pub fn degree(&self) -> usize {
        match self.kind {
            BasisKind::Polynomial(p) | BasisKind::PolynomialPlusCloudMean(p) => p,
        }
    }

    pub fn with_degree(self, p: usize) -> Self {
        Self {
            kind: match self.kind {
                BasisKind::Polynomial(_) => BasisKind::Polynomial(p),
                BasisKind::PolynomialPlusCloudMean(_) => BasisKind::PolynomialPlusCloudMean(p),
            },
            ..self
        }
    }
}

/// Raw (pre-standardization) feature vector, excluding the intercept:
/// per-coordinate powers 1..=degree, plus pairwise cross terms when the
/// degree allows them.
fn raw_features(x: &[f64], degree: usize, out: &mut Vec<f64>) {
    out.clear();
    for &xi in x {
        let mut pow = 1.0;
        for _ in 0..degree {
            pow *= xi;
            out.push(pow);
        }
    }
    if degree >= 2 && x.len() >= 2 {
        for j in 0..x.len() {
            for k in (j + 1)..x.len() {
                out.push(x[j] * x[k]);
            }
        }
    }
}

fn feature_count(dim: usize, degree: usize) -> usize {
    let cross = if degree >= 2 && dim >= 2 {
        dim * (dim - 1) / 2
    } else {
        0
    };
    dim * degree + cross
}

/// A fitted per-step function x -> R^m (one output per right-hand side).
#[derive(Debug, Clone)]
pub struct StepFit {
    dim: usize,
    degree: usize,
    /// Centering point subtracted from x before features are formed
    /// (zero for plain polynomial bases, cloud mean otherwise).
    center: Vec<f64>,
    /// Indices of raw features kept after dropping zero-variance columns.
    kept: Vec<usize>,
    feat_mean: Vec<f64>,
    feat_scale: Vec<f64>,
    /// Row-major (rhs, kept-feature) slopes on standardized features.
    beta: Vec<f64>,
    intercept: Vec<f64>,
    pub outputs: usize,
}

impl StepFit {
    /// A fit that returns the given constants regardless of x.
    pub fn constant(dim: usize, values: &[f64]) -> Self {
        Self {
            dim,
            degree: 0,
            center: vec![0.0; dim],
            kept: Vec::new(),
            feat_mean: Vec::new(),
            feat_scale: Vec::new(),
            beta: Vec::new(),
            intercept: values.to_vec(),
            outputs: values.len(),
        }
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.outputs);
        out.copy_from_slice(&self.intercept);
        if self.kept.is_empty() {
            return;
        }
        let mut raw = Vec::with_capacity(feature_count(self.dim, self.degree));
        let centered: Vec<f64> = x.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        raw_features(&centered, self.degree, &mut raw);
        for (j, &idx) in self.kept.iter().enumerate() {
            let z = (raw[idx] - self.feat_mean[j]) / self.feat_scale[j];
            for (m, o) in out.iter_mut().enumerate() {
                *o += self.beta[m * self.kept.len() + j] * z;
            }
        }
    }

    pub fn eval_scalar(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(self.outputs, 1);
        let mut out = [0.0];
        self.eval(x, &mut out);
        out[0]
    }
}

/// Fits one function per right-hand side on the sample (xs, rhs) by ridge
/// least squares on standardized polynomial features.
///
/// `xs` is row-major (samples x dim); each `rhs` entry has one value per
/// sample. `center` is subtracted from every sample before features are
/// formed (the cloud mean for `PolynomialPlusCloudMean` bases).
pub fn fit_step(
    basis: &RegressionBasis,
    xs: &[f64],
    samples: usize,
    dim: usize,
    center: Option<&[f64]>,
    rhs: &[&[f64]],
) -> Result<StepFit> {
    if samples == 0 || xs.len() != samples * dim {
        return Err(Error::structural("regression sample shape mismatch"));
    }
    for r in rhs {
        if r.len() != samples {
            return Err(Error::structural("right-hand side length mismatch"));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Regression("non-finite regression target".into()));
        }
    }
    let degree = basis.degree();
    let center: Vec<f64> = match center {
        Some(c) => c.to_vec(),
        None => vec![0.0; dim],
    };
    let n_raw = feature_count(dim, degree);
    let nf = n_raw;

    // feature matrix, row-major (samples x features)
    let mut feats = vec![0.0; samples * nf];
    let mut raw = Vec::with_capacity(nf);
    let mut centered = vec![0.0; dim];
    for i in 0..samples {
        for k in 0..dim {
            centered[k] = xs[i * dim + k] - center[k];
        }
        raw_features(&centered, degree, &mut raw);
        feats[i * nf..(i + 1) * nf].copy_from_slice(&raw);
    }

    // standardize; drop (near-)constant columns — they are collinear with
    // the intercept, which is always present
    let mut feat_mean = vec![0.0; nf];
    let mut feat_scale = vec![0.0; nf];
    for j in 0..nf {
        let mut s = 0.0;
        for i in 0..samples {
            s += feats[i * nf + j];
        }
        feat_mean[j] = s / samples as f64;
        let mut v = 0.0;
        for i in 0..samples {
            let d = feats[i * nf + j] - feat_mean[j];
            v += d * d;
        }
        feat_scale[j] = (v / samples as f64).sqrt();
    }
    let kept: Vec<usize> = (0..nf).filter(|&j| feat_scale[j] > 1e-12).collect();
    let p = kept.len();
    let kept_mean: Vec<f64> = kept.iter().map(|&j| feat_mean[j]).collect();
    let kept_scale: Vec<f64> = kept.iter().map(|&j| feat_scale[j]).collect();

    // intercepts are the target means (features are centered)
    let intercept: Vec<f64> = rhs
        .iter()
        .map(|r| r.iter().sum::<f64>() / samples as f64)
        .collect();

    if p == 0 {
        return Ok(StepFit {
            dim,
            degree,
            center,
            kept,
            feat_mean: kept_mean,
            feat_scale: kept_scale,
            beta: Vec::new(),
            intercept,
            outputs: rhs.len(),
        });
    }

    // Gram matrix and cross moments on standardized kept features
    let mut gram = vec![0.0; p * p];
    let mut cross = vec![0.0; rhs.len() * p];
    let mut z = vec![0.0; p];
    for i in 0..samples {
        for (a, &j) in kept.iter().enumerate() {
            z[a] = (feats[i * nf + j] - kept_mean[a]) / kept_scale[a];
        }
        for a in 0..p {
            for b in a..p {
                gram[a * p + b] += z[a] * z[b];
            }
        }
        for (m, r) in rhs.iter().enumerate() {
            let ri = r[i] - intercept[m];
            for a in 0..p {
                cross[m * p + a] += z[a] * ri;
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[a * p + b] = gram[b * p + a];
        }
        gram[a * p + a] += basis.ridge * samples as f64;
    }

    let chol = cholesky(&gram, p)
        .ok_or_else(|| Error::Regression("normal equations not positive definite".into()))?;
    let mut beta = vec![0.0; rhs.len() * p];
    for m in 0..rhs.len() {
        let sol = chol_solve(&chol, p, &cross[m * p..(m + 1) * p]);
        beta[m * p..(m + 1) * p].copy_from_slice(&sol);
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Regression("non-finite fit coefficients".into()));
    }

    Ok(StepFit {
        dim,
        degree,
        center,
        kept,
        feat_mean: kept_mean,
        feat_scale: kept_scale,
        beta,
        intercept,
        outputs: rhs.len(),
    })
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix, row-major; None when a pivot is nonpositive.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cubic_polynomial_exactly() {
        let basis = RegressionBasis::default();
        let n = 200;
        let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - x + 0.5 * x * x - 3.0 * x * x * x).collect();
        let fit = fit_step(&basis, &xs, n, 1, None, &[&ys]).unwrap();
        for &x in &[-0.9, -0.3, 0.0, 0.4, 0.8] {
            let truth = 2.0 - x + 0.5 * x * x - 3.0 * x * x * x;
            assert!((fit.eval_scalar(&[x]) - truth).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_target_gives_constant_fit() {
        let basis = RegressionBasis::default();
        let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let ys = vec![7.0; 50];
        let fit = fit_step(&basis, &xs, 50, 1, None, &[&ys]).unwrap();
        assert!((fit.eval_scalar(&[123.0]) - 7.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_design_falls_back_to_mean() {
        // all samples at the same point: every feature has zero variance,
        // so the fit must reduce to the sample mean rather than fail
        let basis = RegressionBasis::default();
        let xs = vec![1.5; 40];
        let ys: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let fit = fit_step(&basis, &xs, 40, 1, None, &[&ys]).unwrap();
        assert!((fit.eval_scalar(&[1.5]) - 19.5).abs() < 1e-12);
        assert!((fit.eval_scalar(&[9.0]) - 19.5).abs() < 1e-12);
    }

    #[test]
    fn multi_rhs_matches_separate_fits() {
        let basis = RegressionBasis::default().with_degree(2);
        let n = 100;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64) / 10.0 - 5.0).collect();
        let y1: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let y2: Vec<f64> = xs.iter().map(|x| 3.0 * x + 1.0).collect();
        let joint = fit_step(&basis, &xs, n, 1, None, &[&y1, &y2]).unwrap();
        let solo1 = fit_step(&basis, &xs, n, 1, None, &[&y1]).unwrap();
        let solo2 = fit_step(&basis, &xs, n, 1, None, &[&y2]).unwrap();
        let mut out = [0.0, 0.0];
        joint.eval(&[2.5], &mut out);
        assert!((out[0] - solo1.eval_scalar(&[2.5])).abs() < 1e-10);
        assert!((out[1] - solo2.eval_scalar(&[2.5])).abs() < 1e-10);
    }

    #[test]
    fn centered_basis_stores_center() {
        let basis = RegressionBasis {
            kind: BasisKind::PolynomialPlusCloudMean(1),
            ridge: 1e-8,
        };
        let n = 60;
        let xs: Vec<f64> = (0..n).map(|i| 10.0 + i as f64 / 59.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let fit = fit_step(&basis, &xs, n, 1, Some(&[10.5]), &[&ys]).unwrap();
        assert!((fit.eval_scalar(&[10.2]) - 20.4).abs() < 1e-6);
    }

    #[test]
    fn two_dimensional_cross_terms() {
        let basis = RegressionBasis::default().with_degree(2);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                let a = i as f64 / 10.0 - 1.0;
                let b = j as f64 / 10.0 - 1.0;
                xs.extend_from_slice(&[a, b]);
                ys.push(1.0 + a - 2.0 * b + 0.5 * a * b);
            }
        }
        let fit = fit_step(&basis, &xs, 400, 2, None, &[&ys]).unwrap();
        let truth = 1.0 + 0.3 - 2.0 * (-0.7) + 0.5 * 0.3 * (-0.7);
        assert!((fit.eval_scalar(&[0.3, -0.7]) - truth).abs() < 1e-6);
    }

    #[test]
    fn non_finite_target_is_regression_error() {
        let basis = RegressionBasis::default();
        let xs = vec![0.0, 1.0, 2.0];
        let ys = vec![0.0, f64::NAN, 2.0];
        assert!(matches!(
            fit_step(&basis, &xs, 3, 1, None, &[&ys]),
            Err(crate::error::Error::Regression(_))
        ));
    }
}

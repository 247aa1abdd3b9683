//! Least-squares projection onto polynomials of one state variable.
//!
//! The state is standardized before the monomials are formed, which keeps the Gram matrix
//! well conditioned for the quartic basis. Sums run over fixed-size chunks in parallel and
//! are then combined in chunk order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;

const CHUNK: usize = 4096;

/// Conditional-expectation estimator `E[y | x]` for a fixed sample `x`.
#[derive(Debug, Clone)]
pub struct Regressor<S> {
    degree: usize,
    center: S,
    scale: S,
    /// Row-major lower Cholesky factor of the (possibly ridged) Gram matrix.
    chol: Vec<S>,
    degenerate: bool,
    ridged: bool,
}

impl<S: Real> Regressor<S> {
    /// Assembles and factors the Gram matrix of the sample. A sample with no spread
    /// collapses to degree 0, i.e. the plain mean.
    pub fn new(x: &[S], degree: usize) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Regression("empty sample".into()));
        }
        let n = S::from_count(x.len());
        let center = chunked_sum(x, |&v| v) / n;
        let var = chunked_sum(x, |&v| (v - center) * (v - center)) / n;
        let scale = var.sqrt();
        let degenerate = degree == 0 || !(scale > S::lit(1e-12) * (S::one() + center.abs()));
        let mut reg = Self {
            degree: if degenerate { 0 } else { degree },
            center,
            scale: if degenerate { S::one() } else { scale },
            chol: Vec::new(),
            degenerate,
            ridged: false,
        };
        let p = reg.dim();
        let gram = reg.gram(x);
        match cholesky(&gram, p) {
            Some(l) => reg.chol = l,
            None => {
                let trace: S = (0..p).map(|i| gram[i * p + i]).sum();
                let mut ridged = gram;
                for i in 0..p {
                    ridged[i * p + i] += S::lit(1e-10) * trace;
                }
                log::warn!("rank-deficient regression (degree {}); using ridge fallback", reg.degree);
                reg.chol = cholesky(&ridged, p)
                    .ok_or_else(|| Error::Regression("Gram matrix singular even after ridge".into()))?;
                reg.ridged = true;
            }
        }
        Ok(reg)
    }

    /// Number of basis functions.
    #[inline]
    pub fn dim(&self) -> usize {
        self.degree + 1
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// True when the sample had no spread and the regression reduced to the mean.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn used_ridge(&self) -> bool {
        self.ridged
    }

    /// Standardized monomials `1, z, ..., z^d` with `z = (x - center) / scale`.
    #[inline]
    pub fn basis(&self, x: S, out: &mut [S]) {
        let z = (x - self.center) / self.scale;
        let mut m = S::one();
        for o in out.iter_mut().take(self.dim()) {
            *o = m;
            m *= z;
        }
    }

    fn gram(&self, x: &[S]) -> Vec<S> {
        let p = self.dim();
        let partials: Vec<Vec<S>> = x
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![S::zero(); p * p];
                let mut phi = [S::zero(); 16];
                for &xi in chunk {
                    self.basis(xi, &mut phi);
                    for r in 0..p {
                        for c in 0..=r {
                            g[r * p + c] += phi[r] * phi[c];
                        }
                    }
                }
                g
            })
            .collect();
        let mut g = vec![S::zero(); p * p];
        for part in partials {
            for (a, b) in g.iter_mut().zip(part) {
                *a += b;
            }
        }
        for r in 0..p {
            for c in 0..r {
                g[c * p + r] = g[r * p + c];
            }
        }
        g
    }

    /// Coefficients of the least-squares fit of `y` on the basis.
    pub fn fit(&self, x: &[S], y: &[S]) -> Result<Vec<S>> {
        if x.len() != y.len() {
            return Err(Error::Regression(format!("sample sizes differ: {} vs {}", x.len(), y.len())));
        }
        let p = self.dim();
        let partials: Vec<Vec<S>> = x
            .par_chunks(CHUNK)
            .zip(y.par_chunks(CHUNK))
            .map(|(xc, yc)| {
                let mut b = vec![S::zero(); p];
                let mut phi = [S::zero(); 16];
                for (&xi, &yi) in xc.iter().zip(yc) {
                    self.basis(xi, &mut phi);
                    for r in 0..p {
                        b[r] += phi[r] * yi;
                    }
                }
                b
            })
            .collect();
        let mut b = vec![S::zero(); p];
        for part in partials {
            for (a, v) in b.iter_mut().zip(part) {
                *a += v;
            }
        }
        Ok(cholesky_solve(&self.chol, p, b))
    }

    /// Row-major design matrix, one row of basis values per sample point.
    pub fn design(&self, x: &[S]) -> Vec<S> {
        let p = self.dim();
        let mut phi = vec![S::zero(); x.len() * p];
        phi.par_chunks_mut(p).zip(x.par_iter()).for_each(|(row, &xi)| self.basis(xi, row));
        phi
    }

    /// Fits several responses against a precomputed design matrix in one pass.
    pub fn fit_design(&self, phi: &[S], ys: &[&[S]]) -> Result<Vec<Vec<S>>> {
        let p = self.dim();
        let n = phi.len() / p;
        if let Some(y) = ys.iter().find(|y| y.len() != n) {
            return Err(Error::Regression(format!("sample sizes differ: {} vs {}", n, y.len())));
        }
        let m = ys.len();
        let partials: Vec<Vec<S>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut b = vec![S::zero(); p * m];
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let row = &phi[i * p..(i + 1) * p];
                    for (k, y) in ys.iter().enumerate() {
                        let yi = y[i];
                        for r in 0..p {
                            b[k * p + r] += row[r] * yi;
                        }
                    }
                }
                b
            })
            .collect();
        let mut b = vec![S::zero(); p * m];
        for part in partials {
            for (a, v) in b.iter_mut().zip(part) {
                *a += v;
            }
        }
        Ok(b.chunks(p).map(|rhs| cholesky_solve(&self.chol, p, rhs.to_vec())).collect())
    }

    /// Evaluates a fit from a design-matrix row.
    #[inline]
    pub fn predict_row(coeffs: &[S], row: &[S]) -> S {
        coeffs.iter().zip(row).fold(S::zero(), |acc, (&c, &r)| acc + c * r)
    }

    #[inline]
    pub fn predict(&self, coeffs: &[S], x: S) -> S {
        let z = (x - self.center) / self.scale;
        coeffs.iter().rev().fold(S::zero(), |acc, &c| acc * z + c)
    }

    /// Fitted values `E[y | x_i]` at every sample point.
    pub fn project(&self, x: &[S], y: &[S]) -> Result<Vec<S>> {
        let c = self.fit(x, y)?;
        Ok(x.par_iter().map(|&xi| self.predict(&c, xi)).collect())
    }

    /// `Phi^T (y - Phi c)`, which vanishes at the least-squares solution.
    pub fn normal_equation_residual(&self, x: &[S], y: &[S], coeffs: &[S]) -> Vec<S> {
        let p = self.dim();
        let mut out = vec![S::zero(); p];
        let mut phi = [S::zero(); 16];
        for (&xi, &yi) in x.iter().zip(y) {
            self.basis(xi, &mut phi);
            let r = yi - self.predict(coeffs, xi);
            for k in 0..p {
                out[k] += phi[k] * r;
            }
        }
        out
    }

    /// Human-readable description of the basis.
    pub fn describe(&self) -> String {
        format!("monomials up to degree {} in (x - {}) / {}", self.degree, self.center, self.scale)
    }
}

fn chunked_sum<S: Real>(x: &[S], f: impl Fn(&S) -> S + Sync) -> S {
    let parts: Vec<S> = x.par_chunks(CHUNK).map(|c| c.iter().map(&f).sum()).collect();
    parts.into_iter().sum()
}

/// Lower Cholesky factor, `None` if a pivot is not safely positive.
fn cholesky<S: Real>(a: &[S], p: usize) -> Option<Vec<S>> {
    let mut l = vec![S::zero(); p * p];
    let max_diag = (0..p).map(|i| a[i * p + i]).fold(S::zero(), S::max);
    let floor = S::epsilon() * S::lit(64.0) * max_diag;
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= l[j * p + k] * l[j * p + k];
        }
        if !(d > floor) {
            return None;
        }
        let d = d.sqrt();
        l[j * p + j] = d;
        for i in (j + 1)..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = s / d;
        }
    }
    Some(l)
}

fn cholesky_solve<S: Real>(l: &[S], p: usize, mut b: Vec<S>) -> Vec<S> {
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * p + k] * b[k];
        }
        b[i] = s / l[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = b[i];
        for k in (i + 1)..p {
            s -= l[k * p + i] * b[k];
        }
        b[i] = s / l[i * p + i];
    }
    b
}

//! F-norms on finite-dimensional coordinate spaces.
//!
//! The same descriptors serve as Köthe source norms (weights = atom measures)
//! and as target norms of discretized operators. For `0 < p < 1` the F-norm is
//! `Σ w_i |y_i|^p`, which is subadditive but only `p`-homogeneous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{rref, Matrix, PIVOT_TOLERANCE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetNorm {
    /// Weighted `ℓ_p`; `weights = None` means unit weights.
    Lp {
        p: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    /// Weighted sup norm `max_i w_i |y_i|`.
    Sup {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    /// Sup norm of the coefficients in a fixed basis of a subspace.
    CoefficientSup(CoefficientBasis),
}

impl TargetNorm {
    pub fn sup() -> Self {
        TargetNorm::Sup { weights: None }
    }

    pub fn lp(p: f64) -> Self {
        TargetNorm::Lp { p, weights: None }
    }

    pub fn l1() -> Self {
        TargetNorm::lp(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let check_weights = |w: &Option<Vec<f64>>| -> Result<()> {
            if let Some(w) = w {
                if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
                    return Err(Error::InvalidInput("norm weights must be positive and finite".into()));
                }
            }
            Ok(())
        };
        match self {
            TargetNorm::Lp { p, weights } => {
                if !(p.is_finite() && *p > 0.0) {
                    return Err(Error::InvalidInput(format!("lp exponent must be in (0, inf), got {p}")));
                }
                check_weights(weights)
            }
            TargetNorm::Sup { weights } => check_weights(weights),
            TargetNorm::CoefficientSup(_) => Ok(()),
        }
    }

    pub fn is_sup(&self) -> bool {
        matches!(self, TargetNorm::Sup { .. })
    }

    pub fn is_locally_convex(&self) -> bool {
        match self {
            TargetNorm::Lp { p, .. } => *p >= 1.0,
            TargetNorm::Sup { .. } | TargetNorm::CoefficientSup(_) => true,
        }
    }

    /// Exponent `a` with `‖t·y‖ = t^a ‖y‖` for `t ≥ 0`.
    pub fn homogeneity(&self) -> f64 {
        match self {
            TargetNorm::Lp { p, .. } if *p < 1.0 => *p,
            _ => 1.0,
        }
    }

    fn weight(weights: &Option<Vec<f64>>, i: usize) -> f64 {
        weights.as_ref().map_or(1.0, |w| w[i])
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        let expected = match self {
            TargetNorm::Lp { weights: Some(w), .. } | TargetNorm::Sup { weights: Some(w) } => w.len(),
            TargetNorm::CoefficientSup(b) => b.dim(),
            _ => return Ok(()),
        };
        if expected != dim {
            return Err(Error::DimensionMismatch { expected, found: dim });
        }
        Ok(())
    }

    pub fn fnorm(&self, y: &[f64]) -> Result<f64> {
        self.check_dim(y.len())?;
        Ok(self.eval(y))
    }

    /// [`TargetNorm::fnorm`] without the dimension check.
    pub(crate) fn eval(&self, y: &[f64]) -> f64 {
        match self {
            TargetNorm::Sup { weights } => y
                .iter()
                .enumerate()
                .fold(0.0, |m, (i, v)| m.max(Self::weight(weights, i) * v.abs())),
            TargetNorm::Lp { p, weights } => {
                let s: f64 = y
                    .iter()
                    .enumerate()
                    .map(|(i, v)| Self::weight(weights, i) * v.abs().powf(*p))
                    .sum();
                if *p >= 1.0 {
                    s.powf(1.0 / p)
                } else {
                    s
                }
            }
            TargetNorm::CoefficientSup(b) => b.coefficients(y).iter().fold(0.0, |m, c| m.max(c.abs())),
        }
    }

    /// A functional `g` with `⟨g, y⟩ = ‖y‖` and dual norm one.
    pub fn dual_unit_functional(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(y.len())?;
        if !self.is_locally_convex() {
            return Err(Error::NotLocallyConvex);
        }
        let norm = self.eval(y);
        if norm == 0.0 {
            return Err(Error::ZeroVector);
        }
        let mut g = vec![0.0; y.len()];
        match self {
            TargetNorm::Sup { weights } => {
                let j = argmax((0..y.len()).map(|i| Self::weight(weights, i) * y[i].abs()));
                g[j] = y[j].signum() * Self::weight(weights, j);
            }
            TargetNorm::Lp { p, weights } => {
                for (i, gi) in g.iter_mut().enumerate() {
                    if y[i] != 0.0 {
                        let w = Self::weight(weights, i);
                        *gi = if *p == 1.0 {
                            w * y[i].signum()
                        } else {
                            w * y[i].signum() * (y[i].abs() / norm).powf(p - 1.0)
                        };
                    }
                }
            }
            TargetNorm::CoefficientSup(b) => {
                let c = b.coefficients(y);
                let j = argmax(c.iter().map(|v| v.abs()));
                for (k, &row) in b.pivot_rows.iter().enumerate() {
                    g[row] = c[j].signum() * b.inverse[(j, k)];
                }
            }
        }
        Ok(g)
    }

    /// Operator norm of the functional `v ↦ ⟨g, v⟩` against this norm.
    pub fn dual_norm(&self, g: &[f64]) -> Result<f64> {
        self.check_dim(g.len())?;
        if !self.is_locally_convex() {
            return Err(Error::NotLocallyConvex);
        }
        Ok(match self {
            TargetNorm::Sup { weights } => g
                .iter()
                .enumerate()
                .map(|(i, v)| v.abs() / Self::weight(weights, i))
                .sum(),
            TargetNorm::Lp { p, weights } if *p == 1.0 => g
                .iter()
                .enumerate()
                .fold(0.0, |m, (i, v)| m.max(v.abs() / Self::weight(weights, i))),
            TargetNorm::Lp { p, weights } => {
                let q = p / (p - 1.0);
                g.iter()
                    .enumerate()
                    .map(|(i, v)| Self::weight(weights, i).powf(1.0 - q) * v.abs().powf(q))
                    .sum::<f64>()
                    .powf(1.0 / q)
            }
            TargetNorm::CoefficientSup(b) => b
                .basis
                .iter()
                .map(|bj| bj.iter().zip(g).map(|(x, y)| x * y).sum::<f64>().abs())
                .sum(),
        })
    }
}

fn argmax<I: Iterator<Item = f64>>(values: I) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Basis of a subspace together with a left inverse on a set of pivot rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBasis", into = "RawBasis")]
pub struct CoefficientBasis {
    basis: Vec<Vec<f64>>,
    pivot_rows: Vec<usize>,
    inverse: Matrix,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawBasis {
    basis: Vec<Vec<f64>>,
}

impl TryFrom<RawBasis> for CoefficientBasis {
    type Error = Error;

    fn try_from(raw: RawBasis) -> Result<Self> {
        CoefficientBasis::new(raw.basis)
    }
}

impl From<CoefficientBasis> for RawBasis {
    fn from(b: CoefficientBasis) -> RawBasis {
        RawBasis { basis: b.basis }
    }
}

impl CoefficientBasis {
    /// `basis` lists the basis vectors; they must be linearly independent.
    pub fn new(basis: Vec<Vec<f64>>) -> Result<Self> {
        let m = basis.len();
        if m == 0 {
            return Err(Error::InvalidInput("coefficient basis must be nonempty".into()));
        }
        let d = basis[0].len();
        // pivots of Bᵀ are rows of B giving an invertible m × m block
        let bt = Matrix::from_rows(&basis)?;
        let ech = rref(&bt, PIVOT_TOLERANCE);
        if ech.rank() < m {
            return Err(Error::InvalidInput("coefficient basis is linearly dependent".into()));
        }
        let pivot_rows = ech.pivots.clone();
        let mut block = Matrix::zeros(m, m);
        for (k, &r) in pivot_rows.iter().enumerate() {
            for (j, b) in basis.iter().enumerate() {
                if b.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: b.len(),
                    });
                }
                block[(k, j)] = b[r];
            }
        }
        let inverse = invert(&block).ok_or(Error::DegenerateNullspace)?;
        Ok(CoefficientBasis {
            basis,
            pivot_rows,
            inverse,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis[0].len()
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    /// Coordinates of `y` in the basis, read off the pivot rows. Exact for `y`
    /// in the span.
    pub fn coefficients(&self, y: &[f64]) -> Vec<f64> {
        (0..self.rank())
            .map(|j| {
                self.pivot_rows
                    .iter()
                    .enumerate()
                    .map(|(k, &r)| self.inverse[(j, k)] * y[r])
                    .sum()
            })
            .collect()
    }
}

fn invert(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut aug = Matrix::zeros(n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            aug[(i, j)] = a[(i, j)];
        }
        aug[(i, n + i)] = 1.0;
    }
    let ech = rref(&aug, 1e-14);
    if ech.pivots.iter().take(n).copied().ne(0..n) {
        return None;
    }
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            inv[(i, j)] = ech.reduced[(i, n + j)];
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnorm_examples() {
        assert_eq!(TargetNorm::sup().fnorm(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(TargetNorm::l1().fnorm(&[1.0, -1.0]).unwrap(), 2.0);
        assert_eq!(TargetNorm::lp(0.5).fnorm(&[0.25, 0.25]).unwrap(), 1.0);
        let w = TargetNorm::Sup {
            weights: Some(vec![2.0, 1.0]),
        };
        assert_eq!(w.fnorm(&[1.0, -3.0]).unwrap(), 3.0);
        assert!(matches!(
            w.fnorm(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn dual_functional_examples() {
        let g = TargetNorm::sup().dual_unit_functional(&[3.0, -1.0]).unwrap();
        assert_eq!(g, vec![1.0, 0.0]);
        let g = TargetNorm::lp(2.0).dual_unit_functional(&[3.0, 4.0]).unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let g = TargetNorm::l1().dual_unit_functional(&[2.0, -5.0]).unwrap();
        assert_eq!(g, vec![1.0, -1.0]);
        assert_eq!(g[0] * 2.0 + g[1] * -5.0, 7.0);
    }

    #[test]
    fn dual_functional_errors() {
        assert!(matches!(
            TargetNorm::lp(0.5).dual_unit_functional(&[1.0]),
            Err(Error::NotLocallyConvex)
        ));
        assert!(matches!(
            TargetNorm::sup().dual_unit_functional(&[0.0, 0.0]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn locally_convex_flag() {
        assert!(TargetNorm::l1().is_locally_convex());
        assert!(TargetNorm::lp(3.0).is_locally_convex());
        assert!(!TargetNorm::lp(0.999).is_locally_convex());
        assert!(TargetNorm::sup().is_locally_convex());
    }

    #[test]
    fn coefficient_sup_reads_coordinates() {
        let basis = CoefficientBasis::new(vec![vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 2.0]]).unwrap();
        let norm = TargetNorm::CoefficientSup(basis);
        // 2·b0 − 3·b1
        let y = [2.0, -1.0, -6.0];
        assert!((norm.fnorm(&y).unwrap() - 3.0).abs() < 1e-12);
        let g = norm.dual_unit_functional(&y).unwrap();
        let gy: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((gy - 3.0).abs() < 1e-12);
        assert!((norm.dual_norm(&g).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn descriptor_json() {
        let n: TargetNorm = serde_json::from_str(r#"{"kind":"lp","p":1.0,"weights":[0.5,0.5]}"#).unwrap();
        assert_eq!(
            n,
            TargetNorm::Lp {
                p: 1.0,
                weights: Some(vec![0.5, 0.5])
            }
        );
        let s: TargetNorm = serde_json::from_str(r#"{"kind":"sup"}"#).unwrap();
        assert_eq!(s, TargetNorm::sup());
        let c: TargetNorm = serde_json::from_str(r#"{"kind":"coefficient_sup","basis":[[1.0,0.0]]}"#).unwrap();
        assert!(matches!(c, TargetNorm::CoefficientSup(_)));
    }
}

//! Rounding fractional coefficients to integral ones with a dimension-only
//! discrepancy bound, and the `±1` variant used to combine cell signs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{null_vector, ExactSum, Matrix, PIVOT_TOLERANCE};
use crate::spaces::TargetNorm;

/// Coordinates this close to 0 or 1 after a step are treated as settled.
const SNAP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundingInstance {
    pub vectors: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
    pub norm: TargetNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundingResult {
    pub theta: Vec<u8>,
    pub discrepancy: f64,
    pub certificate: f64,
    pub elimination_steps: usize,
    /// `‖Σλ'x − Σλx‖` between the final fractional point and the input.
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignRounding {
    pub signs: Vec<i8>,
    pub achieved: f64,
    pub certificate: f64,
    pub elimination_steps: usize,
}

impl RoundingInstance {
    pub fn new(vectors: Vec<Vec<f64>>, lambdas: Vec<f64>, norm: TargetNorm) -> Result<Self> {
        let inst = RoundingInstance { vectors, lambdas, norm };
        inst.validate()?;
        Ok(inst)
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.norm.is_locally_convex() {
            return Err(Error::NotLocallyConvex);
        }
        self.norm.validate()?;
        if self.lambdas.len() != self.vectors.len() {
            return Err(Error::DimensionMismatch {
                expected: self.vectors.len(),
                found: self.lambdas.len(),
            });
        }
        let d = self.dim();
        for v in &self.vectors {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::DegenerateNullspace);
            }
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::InvalidInput(format!("coefficient {l} outside [0, 1]")));
        }
        if !self.vectors.is_empty() {
            self.norm.fnorm(&self.vectors[0])?;
        }
        Ok(())
    }

    pub fn max_norm(&self) -> f64 {
        self.vectors.iter().map(|v| self.norm.eval(v)).fold(0.0, f64::max)
    }
}

/// `Σ c_i x_i`, summed exactly per coordinate.
pub fn combination(vectors: &[Vec<f64>], coefficients: &[f64]) -> Vec<f64> {
    let d = vectors.first().map_or(0, Vec::len);
    (0..d)
        .map(|k| {
            let mut acc = ExactSum::default();
            for (v, &c) in vectors.iter().zip(coefficients) {
                if c != 0.0 {
                    acc.add(c * v[k]);
                }
            }
            acc.value()
        })
        .collect()
}

/// Rounds every `λ_i` to `θ_i ∈ {0,1}` with `‖Σ(λ_i−θ_i)x_i‖ ≤ (d/2)·max‖x_i‖`.
///
/// While more than `d` coefficients are fractional, a null vector of `d+1`
/// fractional columns gives a direction that keeps `Σλ_i x_i` fixed; stepping
/// along it settles at least one coefficient. The remaining at most `d`
/// fractional coefficients are rounded to the nearest integer, ties to 0.
pub fn round_half_integer(instance: &RoundingInstance) -> Result<RoundingResult> {
    instance.validate()?;
    let n = instance.vectors.len();
    let d = instance.dim();
    let mut lambda = instance.lambdas.clone();
    let mut floating: Vec<usize> = (0..n).filter(|&i| lambda[i] > 0.0 && lambda[i] < 1.0).collect();
    let mut steps = 0;

    while floating.len() > d {
        let chosen: Vec<usize> = floating[..d + 1].to_vec();
        let scales: Vec<f64> = chosen
            .iter()
            .map(|&i| instance.vectors[i].iter().fold(0.0, |m: f64, v| m.max(v.abs())))
            .collect();
        let u = match scales.iter().position(|&s| s == 0.0) {
            // a zero vector can move freely on its own
            Some(z) => {
                let mut u = vec![0.0; chosen.len()];
                u[z] = 1.0;
                u
            }
            None => {
                let cols: Vec<Vec<f64>> = chosen
                    .iter()
                    .zip(&scales)
                    .map(|(&i, s)| instance.vectors[i].iter().map(|v| v / s).collect())
                    .collect();
                let m = Matrix::from_columns(d, &cols).map_err(|_| Error::DegenerateNullspace)?;
                let u = null_vector(&m, PIVOT_TOLERANCE).ok_or(Error::DegenerateNullspace)?;
                u.iter().zip(&scales).map(|(a, s)| a / s).collect()
            }
        };
        if u.iter().any(|v| !v.is_finite()) || u.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateNullspace);
        }

        let (up, up_arg) = max_step(&chosen, &u, &lambda, 1.0);
        let (down, down_arg) = max_step(&chosen, &u, &lambda, -1.0);
        let (t, arg, dir) = if up <= down {
            (up, up_arg, 1.0)
        } else {
            (down, down_arg, -1.0)
        };
        for (k, &i) in chosen.iter().enumerate() {
            if u[k] == 0.0 {
                continue;
            }
            let mut v = lambda[i] + dir * t * u[k];
            if v < SNAP {
                v = 0.0;
            } else if v > 1.0 - SNAP {
                v = 1.0;
            }
            lambda[i] = v;
        }
        let settled = chosen[arg];
        lambda[settled] = if dir * u[arg] > 0.0 { 1.0 } else { 0.0 };
        let before = floating.len();
        floating.retain(|&i| lambda[i] > 0.0 && lambda[i] < 1.0);
        debug_assert!(floating.len() < before);
        steps += 1;
    }

    let theta: Vec<u8> = lambda.iter().map(|&l| u8::from(l > 0.5)).collect();
    let diff: Vec<f64> = instance
        .lambdas
        .iter()
        .zip(&theta)
        .map(|(l, &t)| l - t as f64)
        .collect();
    let discrepancy = instance.norm.eval(&combination(&instance.vectors, &diff));
    let moved: Vec<f64> = lambda.iter().zip(&instance.lambdas).map(|(a, b)| a - b).collect();
    let drift = instance.norm.eval(&combination(&instance.vectors, &moved));
    Ok(RoundingResult {
        theta,
        discrepancy,
        certificate: d as f64 / 2.0 * instance.max_norm(),
        elimination_steps: steps,
        drift,
    })
}

/// Largest `t ≥ 0` keeping `λ + dir·t·u` in `[0,1]` on the chosen columns,
/// with the position of a coordinate that hits the boundary.
fn max_step(chosen: &[usize], u: &[f64], lambda: &[f64], dir: f64) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (k, &i) in chosen.iter().enumerate() {
        let v = dir * u[k];
        let t = if v > 0.0 {
            (1.0 - lambda[i]) / v
        } else if v < 0.0 {
            -lambda[i] / v
        } else {
            continue;
        };
        if t < best.0 {
            best = (t, k);
        }
    }
    best
}

/// Signs `σ_i ∈ {−1,+1}` with `‖Σσ_i x_i‖ ≤ d·max‖x_i‖`, from rounding all
/// coefficients `1/2` and setting `σ_i = 1 − 2θ_i`.
pub fn sign_round(vectors: &[Vec<f64>], norm: &TargetNorm) -> Result<SignRounding> {
    if vectors.is_empty() {
        return Err(Error::InvalidInput("sign rounding needs at least one vector".into()));
    }
    let inst = RoundingInstance::new(vectors.to_vec(), vec![0.5; vectors.len()], norm.clone())?;
    let res = round_half_integer(&inst)?;
    let signs: Vec<i8> = res.theta.iter().map(|&t| 1 - 2 * t as i8).collect();
    let coeffs: Vec<f64> = signs.iter().map(|&s| s as f64).collect();
    Ok(SignRounding {
        achieved: norm.eval(&combination(vectors, &coeffs)),
        certificate: inst.dim() as f64 * inst.max_norm(),
        signs,
        elimination_steps: res.elimination_steps,
    })
}

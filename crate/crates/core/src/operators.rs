//! Discretized linear operators from step functions over a [`MeasureSpace`]
//! into a finite-dimensional F-normed target.
//!
//! Column `i` of the matrix is the image of the indicator of atom `i`. Sign
//! images are summed exactly, so signs whose terms cancel in real arithmetic
//! have images that are exactly zero.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ExactSum, Matrix};
use crate::measure::{AtomSet, MeasureSpace, Refinement, SignVector};
use crate::spaces::TargetNorm;

/// Largest set searched exhaustively over full-support `±1` patterns.
pub const FULL_SUPPORT_LIMIT: usize = 20;
/// Largest set searched exhaustively over `{-1, 0, +1}` patterns.
pub const ZERO_ALLOWED_LIMIT: usize = 13;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteOperator {
    matrix: Matrix,
    space: Arc<MeasureSpace>,
    target: TargetNorm,
}

/// Value of `max ‖Tx‖` over signs supported in a set, or an upper bound on it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignImageBound {
    pub value: f64,
    pub exact: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    /// Signs whose support is exactly the set (`±1` on every atom).
    Full,
    /// Signs whose support is contained in the set.
    Subset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignSearch {
    pub support: Support,
    pub mean_zero: bool,
    pub objective: Objective,
}

impl SignSearch {
    pub fn smallest_mean_zero_on_set() -> Self {
        SignSearch {
            support: Support::Full,
            mean_zero: true,
            objective: Objective::Min,
        }
    }
}

impl DiscreteOperator {
    pub fn new(matrix: Matrix, space: Arc<MeasureSpace>, target: TargetNorm) -> Result<Self> {
        if matrix.cols() != space.len() {
            return Err(Error::DimensionMismatch {
                expected: space.len(),
                found: matrix.cols(),
            });
        }
        target.validate()?;
        target.fnorm(&vec![0.0; matrix.rows()])?;
        Ok(DiscreteOperator { matrix, space, target })
    }

    pub fn zero(space: Arc<MeasureSpace>, target_dim: usize, target: TargetNorm) -> Result<Self> {
        let cols = space.len();
        DiscreteOperator::new(Matrix::zeros(target_dim, cols), space, target)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn space(&self) -> &Arc<MeasureSpace> {
        &self.space
    }

    pub fn target(&self) -> &TargetNorm {
        &self.target
    }

    pub fn target_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn atoms(&self) -> usize {
        self.matrix.cols()
    }

    pub fn column(&self, atom: usize) -> Vec<f64> {
        self.matrix.column(atom)
    }

    pub fn column_norm(&self, atom: usize) -> f64 {
        self.target.eval(&self.column(atom))
    }

    pub fn norm(&self, y: &[f64]) -> f64 {
        self.target.eval(y)
    }

    /// Image of a step function given by its values on the atoms.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.atoms() {
            return Err(Error::DimensionMismatch {
                expected: self.atoms(),
                found: x.len(),
            });
        }
        Ok((0..self.target_dim())
            .map(|r| {
                let mut acc = ExactSum::default();
                for (m, &v) in self.matrix.row(r).iter().zip(x) {
                    if v != 0.0 && *m != 0.0 {
                        acc.add(m * v);
                    }
                }
                acc.value()
            })
            .collect())
    }

    pub fn apply_sign(&self, x: &SignVector) -> Result<Vec<f64>> {
        if x.len() != self.atoms() {
            return Err(Error::DimensionMismatch {
                expected: self.atoms(),
                found: x.len(),
            });
        }
        Ok((0..self.target_dim())
            .map(|r| {
                let mut acc = ExactSum::default();
                for (m, &v) in self.matrix.row(r).iter().zip(x.values()) {
                    match v {
                        1 => acc.add(*m),
                        -1 => acc.add(-*m),
                        _ => {}
                    }
                }
                acc.value()
            })
            .collect())
    }

    pub fn image_norm(&self, x: &SignVector) -> Result<f64> {
        Ok(self.target.eval(&self.apply_sign(x)?))
    }

    pub fn indicator_image(&self, set: &AtomSet) -> Result<Vec<f64>> {
        self.space.check_set(set)?;
        self.apply_sign(&SignVector::constant_on(self.atoms(), set, 1))
    }

    /// `‖T 1_set‖`.
    pub fn indicator_image_norm(&self, set: &AtomSet) -> Result<f64> {
        Ok(self.target.eval(&self.indicator_image(set)?))
    }

    /// Row-wise absolute sums `w_k Σ_{i∈set} |M_ki|` (sup targets only).
    fn weighted_row_abs_sums(&self, set: &AtomSet) -> Vec<f64> {
        let weights = match &self.target {
            TargetNorm::Sup { weights } => weights.clone(),
            _ => None,
        };
        (0..self.target_dim())
            .map(|r| {
                let row = self.matrix.row(r);
                let s: f64 = set.iter().map(|i| row[i].abs()).sum();
                weights.as_ref().map_or(1.0, |w| w[r]) * s
            })
            .collect()
    }

    /// For sup targets: the row attaining `max ‖Tx‖` over signs in `set` and a
    /// sign with support exactly `set` attaining it.
    pub fn sup_maximizing_sign(&self, set: &AtomSet) -> Option<(usize, SignVector, f64)> {
        if !self.target.is_sup() || set.is_empty() || self.target_dim() == 0 {
            return None;
        }
        let sums = self.weighted_row_abs_sums(set);
        let mut best = 0;
        for (r, &s) in sums.iter().enumerate() {
            if s > sums[best] {
                best = r;
            }
        }
        let row = self.matrix.row(best);
        let mut sign = SignVector::zeros(self.atoms());
        for i in set.iter() {
            sign.set(i, if row[i] < 0.0 { -1 } else { 1 });
        }
        Some((best, sign, sums[best]))
    }

    /// `max ‖Tx‖` over signs with support in `set`, using the default
    /// exhaustive limits.
    pub fn max_sign_image_norm(&self, set: &AtomSet) -> Result<SignImageBound> {
        self.max_sign_image_norm_within(set, FULL_SUPPORT_LIMIT)
    }

    /// As [`DiscreteOperator::max_sign_image_norm`] but exhausting at most
    /// `limit` atoms; larger sets get the bound `Σ ‖column_i‖`.
    pub fn max_sign_image_norm_within(&self, set: &AtomSet, limit: usize) -> Result<SignImageBound> {
        self.space.check_set(set)?;
        if set.is_empty() {
            return Ok(SignImageBound {
                value: 0.0,
                exact: true,
            });
        }
        if self.target.is_sup() {
            let value = self.weighted_row_abs_sums(set).into_iter().fold(0.0, f64::max);
            return Ok(SignImageBound { value, exact: true });
        }
        let search = if self.target.is_locally_convex() {
            // a convex function on the cube peaks at a vertex
            (set.len() <= limit.min(FULL_SUPPORT_LIMIT)).then_some(Support::Full)
        } else {
            (set.len() <= limit.min(ZERO_ALLOWED_LIMIT)).then_some(Support::Subset)
        };
        if let Some(support) = search {
            let (_, value) = self.brute_force_best_sign(
                set,
                SignSearch {
                    support,
                    mean_zero: false,
                    objective: Objective::Max,
                },
            )?;
            return Ok(SignImageBound { value, exact: true });
        }
        Ok(SignImageBound {
            value: self.column_norm_sum(set),
            exact: false,
        })
    }

    /// `Σ_{i∈set} ‖column_i‖`, an upper bound for every sign image on `set`.
    pub fn column_norm_sum(&self, set: &AtomSet) -> f64 {
        set.iter().map(|i| self.column_norm(i)).sum()
    }

    /// Exhaustive search over sign patterns on `set`. Ties resolve to the
    /// lexicographically smallest pattern in set order with `-1 < 0 < +1`.
    /// The zero sign is never returned by a minimization.
    pub fn brute_force_best_sign(&self, set: &AtomSet, search: SignSearch) -> Result<(SignVector, f64)> {
        self.space.check_set(set)?;
        let limit = match search.support {
            Support::Full => FULL_SUPPORT_LIMIT,
            Support::Subset => ZERO_ALLOWED_LIMIT,
        };
        if set.len() > limit {
            return Err(Error::SetTooLarge { size: set.len(), limit });
        }
        let atoms: Vec<usize> = set.iter().collect();
        let columns: Vec<Vec<f64>> = atoms.iter().map(|&i| self.column(i)).collect();
        let weights: Vec<i128> = atoms.iter().map(|&i| self.space.numerators()[i] as i128).collect();
        let domain: &[i8] = match search.support {
            Support::Full => &[-1, 1],
            Support::Subset => &[-1, 0, 1],
        };
        let mut state = Dfs {
            op: self,
            columns: &columns,
            weights: &weights,
            domain,
            search,
            images: vec![vec![0.0; self.target_dim()]; atoms.len() + 1],
            current: vec![0; atoms.len()],
            best: None,
        };
        state.visit(0, 0, false);
        let (pattern, _) = state.best.ok_or(Error::NoFeasibleSign)?;
        let mut sign = SignVector::zeros(self.atoms());
        for (k, &i) in atoms.iter().enumerate() {
            sign.set(i, pattern[k]);
        }
        let value = self.image_norm(&sign)?;
        Ok((sign, value))
    }

    /// The same operator on a refined space, splitting every column equally
    /// among its children (integral-type operators).
    pub fn refined(&self, space: Arc<MeasureSpace>, map: &Refinement) -> Result<Self> {
        self.refined_with(space, map, |col, parts| {
            let child: Vec<f64> = col.iter().map(|v| v / parts as f64).collect();
            vec![child; parts]
        })
    }

    /// Refine with a custom kernel hook. `split(column, parts)` must return
    /// `parts` columns summing to `column`.
    pub fn refined_with<F>(&self, space: Arc<MeasureSpace>, map: &Refinement, split: F) -> Result<Self>
    where
        F: Fn(&[f64], usize) -> Vec<Vec<f64>>,
    {
        if map.old_len() != self.atoms() || map.new_len() != space.len() {
            return Err(Error::DimensionMismatch {
                expected: self.atoms(),
                found: map.old_len(),
            });
        }
        let rows = self.target_dim();
        let mut columns = Vec::with_capacity(space.len());
        for i in 0..self.atoms() {
            let parts = map.children(i).len();
            let col = self.column(i);
            if parts == 1 {
                columns.push(col);
            } else {
                let children = split(&col, parts);
                if children.len() != parts {
                    return Err(Error::InvalidInput(
                        "column split returned the wrong number of parts".into(),
                    ));
                }
                columns.extend(children);
            }
        }
        let matrix = Matrix::from_columns(rows, &columns)?;
        DiscreteOperator::new(matrix, space, self.target.clone())
    }

    /// Zero all target coordinates with index `>= keep`.
    pub fn truncated(&self, keep: usize) -> Self {
        let mut matrix = self.matrix.clone();
        for r in keep.min(self.target_dim())..self.target_dim() {
            for c in 0..self.atoms() {
                matrix[(r, c)] = 0.0;
            }
        }
        DiscreteOperator {
            matrix,
            space: self.space.clone(),
            target: self.target.clone(),
        }
    }

    /// The operator `F ∘ T` into a new target.
    pub fn compose_left(&self, left: &Matrix, target: TargetNorm) -> Result<Self> {
        DiscreteOperator::new(left.mul(&self.matrix)?, self.space.clone(), target)
    }
}

struct Dfs<'a> {
    op: &'a DiscreteOperator,
    columns: &'a [Vec<f64>],
    weights: &'a [i128],
    domain: &'a [i8],
    search: SignSearch,
    images: Vec<Vec<f64>>,
    current: Vec<i8>,
    best: Option<(Vec<i8>, f64)>,
}

impl Dfs<'_> {
    fn visit(&mut self, depth: usize, integral: i128, nonzero: bool) {
        if depth == self.columns.len() {
            if self.search.mean_zero && integral != 0 {
                return;
            }
            if self.search.objective == Objective::Min && !nonzero {
                return;
            }
            let value = self.op.target.eval(&self.images[depth]);
            let better = match (&self.best, self.search.objective) {
                (None, _) => true,
                (Some((_, b)), Objective::Min) => value < *b,
                (Some((_, b)), Objective::Max) => value > *b,
            };
            if better {
                self.best = Some((self.current.clone(), value));
            }
            return;
        }
        for &v in self.domain {
            self.current[depth] = v;
            let (head, tail) = self.images.split_at_mut(depth + 1);
            let prev = &head[depth];
            let next = &mut tail[0];
            for ((n, p), c) in next.iter_mut().zip(prev).zip(&self.columns[depth]) {
                *n = p + v as f64 * c;
            }
            self.visit(depth + 1, integral + v as i128 * self.weights[depth], nonzero || v != 0);
        }
        self.current[depth] = 0;
    }
}

/// Greedy net over points of the target: every point lies within `radius`
/// of some center, and every center is one of the points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetCover {
    pub centers: Vec<Vec<f64>>,
    pub radius: f64,
    /// Index of the input point that opened each center.
    pub sources: Vec<usize>,
    /// Center assigned to each input point.
    pub assignment: Vec<usize>,
}

impl NetCover {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Input points grouped by center.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.centers.len()];
        for (p, &c) in self.assignment.iter().enumerate() {
            groups[c].push(p);
        }
        groups
    }
}

pub(crate) fn distance(norm: &TargetNorm, a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm.eval(&diff)
}

/// Operator bundle as stored in JSON files: space, matrix and target norm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OperatorBundle {
    pub space: MeasureSpace,
    pub matrix: MatrixRows,
    pub norm: TargetNorm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixRows {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

impl OperatorBundle {
    pub fn from_operator(op: &DiscreteOperator) -> Self {
        OperatorBundle {
            space: (**op.space()).clone(),
            matrix: MatrixRows {
                rows: op.target_dim(),
                cols: op.atoms(),
                data: (0..op.target_dim()).map(|r| op.matrix().row(r).to_vec()).collect(),
            },
            norm: op.target().clone(),
        }
    }

    pub fn into_operator(self) -> Result<DiscreteOperator> {
        let matrix = Matrix::from_rows(&self.matrix.data)?;
        if matrix.rows() != self.matrix.rows || (self.matrix.rows > 0 && matrix.cols() != self.matrix.cols) {
            return Err(Error::InvalidInput(
                "matrix shape does not match its rows/cols header".into(),
            ));
        }
        let matrix = if self.matrix.rows == 0 {
            Matrix::zeros(0, self.matrix.cols)
        } else {
            matrix
        };
        DiscreteOperator::new(matrix, Arc::new(self.space), self.norm)
    }
}

/// Read a row-major CSV matrix: a `rows,cols` header, one line with the
/// shape, then one line per row.
pub fn read_matrix_csv<R: std::io::Read>(reader: R) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "rows" || &headers[1] != "cols" {
        return Err(Error::InvalidInput(
            "matrix CSV must start with a rows,cols header".into(),
        ));
    }
    let mut records = rdr.records();
    let shape = records
        .next()
        .ok_or_else(|| Error::InvalidInput("matrix CSV is missing its shape line".into()))??;
    let parse_usize = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::InvalidInput(format!("bad shape {s}: {e}")))
    };
    let rows = parse_usize(&shape[0])?;
    let cols = parse_usize(&shape[1])?;
    let mut data = Vec::with_capacity(rows * cols);
    for record in records {
        let record = record?;
        if record.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                found: record.len(),
            });
        }
        for field in record.iter() {
            data.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("bad entry {field}: {e}")))?,
            );
        }
    }
    Matrix::from_row_major(rows, cols, data)
}

pub fn write_matrix_csv<W: std::io::Write>(matrix: &Matrix, writer: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().flexible(true).from_writer(writer);
    wtr.write_record(["rows", "cols"])?;
    wtr.write_record([matrix.rows().to_string(), matrix.cols().to_string()])?;
    for r in 0..matrix.rows() {
        wtr.write_record(matrix.row(r).iter().map(|v| format!("{v:?}")))?;
    }
    wtr.flush()?;
    Ok(())
}

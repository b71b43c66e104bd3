//! Concrete operators: the dyadic-cell integration operator into `ℓ1`, the
//! conditional expectation on a square grid, and seeded random families.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::measure::{AtomSet, MeasureSpace};
use crate::operators::DiscreteOperator;
use crate::spaces::TargetNorm;

/// Layout of the dyadic-cell example: which atoms belong to which cell.
#[derive(Clone, Debug, PartialEq)]
pub struct L1Example {
    pub operator: DiscreteOperator,
    pub levels: usize,
    pub atoms_per_level: usize,
    /// Atoms of `[0, 2^-N]`, which the operator ignores.
    pub residual: AtomSet,
    /// `cells[n-1]` holds the atoms of `[2^-n, 2^-(n-1)]`.
    pub cells: Vec<AtomSet>,
}

impl L1Example {
    pub fn cell(&self, n: usize) -> &AtomSet {
        &self.cells[n - 1]
    }

    /// The step vector `2^n · 1_{A_n}`, of unit integral.
    pub fn normalized_indicator(&self, n: usize) -> Vec<f64> {
        let scale = (n as f64).exp2();
        let mut x = vec![0.0; self.operator.atoms()];
        for i in self.cell(n).iter() {
            x[i] = scale;
        }
        x
    }
}

/// The operator `x ↦ (∫_{A_n} x dμ)_{n ≤ N}` into `ℓ1^N` with
/// `A_n = [2^-n, 2^-(n-1)]`, each cell cut into `atoms_per_level` equal atoms.
/// Atoms are ordered by position: the residual cell `[0, 2^-N]` first, then
/// `A_N, …, A_1`.
pub fn build_l1_example(levels: usize, atoms_per_level: usize) -> Result<L1Example> {
    if levels == 0 || levels > 60 {
        return Err(Error::InvalidInput(format!("levels must be in 1..=60, got {levels}")));
    }
    if atoms_per_level < 2 || !atoms_per_level.is_power_of_two() {
        return Err(Error::InvalidInput(format!(
            "atoms_per_level must be a power of two at least 2, got {atoms_per_level}"
        )));
    }
    let split = atoms_per_level.trailing_zeros();
    let denominator_log2 = levels as u32 + split;
    let mut numerators = vec![1u64; atoms_per_level];
    let residual = AtomSet::new((0..atoms_per_level).collect());
    let mut cells = vec![AtomSet::empty(); levels];
    for n in (1..=levels).rev() {
        let start = numerators.len();
        numerators.extend(std::iter::repeat_n(1u64 << (levels - n), atoms_per_level));
        cells[n - 1] = AtomSet::new((start..numerators.len()).collect());
    }
    let space = Arc::new(MeasureSpace::new(denominator_log2, numerators)?);
    let mut matrix = Matrix::zeros(levels, space.len());
    for (row, cell) in cells.iter().enumerate() {
        for i in cell.iter() {
            matrix[(row, i)] = space.weight_f64(i);
        }
    }
    let operator = DiscreteOperator::new(matrix, space, TargetNorm::l1())?;
    Ok(L1Example {
        operator,
        levels,
        atoms_per_level,
        residual,
        cells,
    })
}

/// `(Px)(t) = ∫ x(t, s) ds` on a `k × k` grid of equal atoms (atom `t·k + s`),
/// into `ℓ∞^k`.
pub fn build_conditional_expectation(grid: usize) -> Result<DiscreteOperator> {
    if grid == 0 || !grid.is_power_of_two() {
        return Err(Error::NonDyadic(grid));
    }
    let atoms = grid.checked_mul(grid).ok_or(Error::Overflow)?;
    let space = Arc::new(MeasureSpace::uniform(atoms)?);
    let mut matrix = Matrix::zeros(grid, atoms);
    let entry = 1.0 / grid as f64;
    for t in 0..grid {
        for s in 0..grid {
            matrix[(t, t * grid + s)] = entry;
        }
    }
    DiscreteOperator::new(matrix, space, TargetNorm::sup())
}

fn random_unit_column(rng: &mut ChaCha8Rng, dim: usize, norm: &TargetNorm) -> Vec<f64> {
    loop {
        let col: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm.eval(&col);
        if n > 1e-3 {
            let h = norm.homogeneity();
            let s = n.powf(-1.0 / h);
            return col.into_iter().map(|v| v * s).collect();
        }
    }
}

/// Columns with `‖column_i‖ = u_i · decay^rank(i)`, `u_i ∈ [1/2, 1]`, where
/// `rank` is a seeded random permutation of the atoms. `decay = 0` gives the
/// zero operator.
pub fn random_narrow_operator(
    seed: u64,
    space: Arc<MeasureSpace>,
    target_dim: usize,
    decay: f64,
    norm: TargetNorm,
) -> Result<DiscreteOperator> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidInput(format!("decay must lie in [0, 1), got {decay}")));
    }
    if target_dim == 0 {
        return Err(Error::InvalidInput("target_dim must be positive".into()));
    }
    norm.validate()?;
    if decay == 0.0 {
        return DiscreteOperator::zero(space, target_dim, norm);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms = space.len();
    let mut rank: Vec<usize> = (0..atoms).collect();
    rank.shuffle(&mut rng);
    let h = norm.homogeneity();
    let mut columns = Vec::with_capacity(atoms);
    for &r in &rank {
        let size = rng.gen_range(0.5..=1.0) * decay.powi(r.min(i32::MAX as usize) as i32);
        let unit = random_unit_column(&mut rng, target_dim, &norm);
        // an F-norm of homogeneity h scales by |c|^h
        let c = size.powf(1.0 / h);
        columns.push(unit.into_iter().map(|v| v * c).collect());
    }
    DiscreteOperator::new(Matrix::from_columns(target_dim, &columns)?, space, norm)
}

/// `A · B · diag(μ)` with seeded uniform factors `A` (`target_dim × rank`)
/// and `B` (`rank × atoms`): an integral operator with a rank-`rank` kernel.
pub fn random_finite_rank(
    seed: u64,
    rank: usize,
    space: Arc<MeasureSpace>,
    target_dim: usize,
    norm: TargetNorm,
) -> Result<DiscreteOperator> {
    let atoms = space.len();
    if rank > target_dim.min(atoms) {
        return Err(Error::InvalidInput(format!(
            "rank {rank} exceeds min(target_dim, atoms) = {}",
            target_dim.min(atoms)
        )));
    }
    if target_dim == 0 {
        return Err(Error::InvalidInput("target_dim must be positive".into()));
    }
    norm.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut left = Matrix::zeros(target_dim, rank);
    for r in 0..target_dim {
        for k in 0..rank {
            left[(r, k)] = rng.gen_range(-1.0..1.0);
        }
    }
    let mut right = Matrix::zeros(rank, atoms);
    for k in 0..rank {
        for i in 0..atoms {
            right[(k, i)] = rng.gen_range(-1.0..1.0) * space.weight_f64(i);
        }
    }
    let matrix = left.mul(&right)?;
    DiscreteOperator::new(matrix, space, norm)
}

/// Instance descriptors accepted wherever an operator is expected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceSpec {
    L1Example {
        levels: usize,
        atoms_per_level: usize,
    },
    ConditionalExpectation {
        grid: usize,
    },
    RandomNarrow {
        #[serde(default)]
        atoms: Option<usize>,
        target_dim: usize,
        decay: f64,
        #[serde(default = "TargetNorm::sup")]
        norm: TargetNorm,
        #[serde(default)]
        seed: Option<u64>,
    },
    RandomFiniteRank {
        rank: usize,
        #[serde(default)]
        atoms: Option<usize>,
        target_dim: usize,
        #[serde(default = "TargetNorm::sup")]
        norm: TargetNorm,
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl InstanceSpec {
    /// Build the operator. Random families use their own seed if given,
    /// otherwise `seed`, and live on `space` when one is supplied.
    pub fn build(&self, seed: u64, space: Option<Arc<MeasureSpace>>) -> Result<DiscreteOperator> {
        let pick_space = |atoms: &Option<usize>| -> Result<Arc<MeasureSpace>> {
            match (&space, atoms) {
                (Some(s), Some(a)) if s.len() != *a => Err(Error::DimensionMismatch {
                    expected: s.len(),
                    found: *a,
                }),
                (Some(s), _) => Ok(s.clone()),
                (None, Some(a)) => Ok(Arc::new(MeasureSpace::uniform(*a)?)),
                (None, None) => Err(Error::InvalidInput(
                    "random instance needs `atoms` or a shared space".into(),
                )),
            }
        };
        let fixed = |op: DiscreteOperator| -> Result<DiscreteOperator> {
            match &space {
                Some(s) if **s != **op.space() => Err(Error::InvalidInput(
                    "instance defines its own space, which differs from the shared one".into(),
                )),
                _ => Ok(op),
            }
        };
        match self {
            InstanceSpec::L1Example {
                levels,
                atoms_per_level,
            } => fixed(build_l1_example(*levels, *atoms_per_level)?.operator),
            InstanceSpec::ConditionalExpectation { grid } => fixed(build_conditional_expectation(*grid)?),
            InstanceSpec::RandomNarrow {
                atoms,
                target_dim,
                decay,
                norm,
                seed: own,
            } => random_narrow_operator(
                own.unwrap_or(seed),
                pick_space(atoms)?,
                *target_dim,
                *decay,
                norm.clone(),
            ),
            InstanceSpec::RandomFiniteRank {
                rank,
                atoms,
                target_dim,
                norm,
                seed: own,
            } => random_finite_rank(
                own.unwrap_or(seed),
                *rank,
                pick_space(atoms)?,
                *target_dim,
                norm.clone(),
            ),
        }
    }

    /// Whether the instance brings its own measure space.
    pub fn defines_space(&self) -> bool {
        match self {
            InstanceSpec::L1Example { .. } | InstanceSpec::ConditionalExpectation { .. } => true,
            InstanceSpec::RandomNarrow { atoms, .. } | InstanceSpec::RandomFiniteRank { atoms, .. } => atoms.is_some(),
        }
    }
}

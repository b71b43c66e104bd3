//! Small mean-zero signs, partitions into cells on which every sign has a
//! small image, and the adversarial construction of disjoint large signs.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{BestSign, Error, Result};
use crate::measure::{max_rademacher_level, rademacher_sign, uniformizing_splits, AtomSet, Refinement, SignVector};
use crate::operators::{distance, DiscreteOperator, NetCover, Objective, SignSearch, Support};
use crate::spaces::TargetNorm;

/// Default cap on the number of atoms a refining search may create.
pub const DEFAULT_ATOM_BUDGET: usize = 1 << 16;
/// Cells up to this size get an exact bound in partition reports.
pub const EXACT_CELL_LIMIT: usize = 12;
const AUTO_EXHAUSTIVE_LIMIT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Exhaustive,
    RademacherScan,
    KernelPairing,
    #[default]
    Auto,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exhaustive" => Ok(Strategy::Exhaustive),
            "rademacher_scan" | "rademacher-scan" => Ok(Strategy::RademacherScan),
            "kernel_pairing" | "kernel-pairing" => Ok(Strategy::KernelPairing),
            "auto" => Ok(Strategy::Auto),
            _ => Err(Error::InvalidInput(format!("unknown strategy {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmallSign {
    pub sign: SignVector,
    pub norm: f64,
    pub strategy: Strategy,
}

/// A small sign found after refining the operator.
#[derive(Clone, Debug)]
pub struct RefinedSmallSign {
    pub sign: SignVector,
    pub norm: f64,
    pub strategy: Strategy,
    pub operator: DiscreteOperator,
    /// From the input operator's space to `operator`'s space.
    pub refinement: Refinement,
}

/// A mean-zero sign with support exactly `set` and `‖Tx‖ < ε`.
pub fn find_small_sign(op: &DiscreteOperator, set: &AtomSet, epsilon: f64, strategy: Strategy) -> Result<SmallSign> {
    search(op, set, epsilon, strategy, false)
}

/// As [`find_small_sign`] but accepting `‖Tx‖ ≤ budget`.
pub fn find_sign_within(op: &DiscreteOperator, set: &AtomSet, budget: f64, strategy: Strategy) -> Result<SmallSign> {
    search(op, set, budget, strategy, true)
}

fn search(
    op: &DiscreteOperator,
    set: &AtomSet,
    epsilon: f64,
    strategy: Strategy,
    inclusive: bool,
) -> Result<SmallSign> {
    let accept = |v: f64| if inclusive { v <= epsilon } else { v < epsilon };
    op.space().check_set(set)?;
    if set.is_empty() {
        return Err(Error::NoFeasibleSign);
    }
    let mut best: Option<(SignVector, f64)> = None;
    let mut keep = |x: SignVector, v: f64| {
        if best.as_ref().is_none_or(|b| v < b.1) {
            best = Some((x, v));
        }
    };
    let order: &[Strategy] = match strategy {
        Strategy::Auto => &[Strategy::KernelPairing, Strategy::Exhaustive, Strategy::RademacherScan],
        Strategy::Exhaustive => &[Strategy::Exhaustive],
        Strategy::RademacherScan => &[Strategy::RademacherScan],
        Strategy::KernelPairing => &[Strategy::KernelPairing],
    };
    let mut last_err = None;
    for &s in order {
        let attempt = match s {
            Strategy::KernelPairing => kernel_pairing(op, set).map(|x| vec![x]),
            Strategy::Exhaustive => {
                if strategy == Strategy::Auto && set.len() > AUTO_EXHAUSTIVE_LIMIT {
                    continue;
                }
                op.brute_force_best_sign(set, SignSearch::smallest_mean_zero_on_set())
                    .map(|(x, _)| vec![x])
            }
            Strategy::RademacherScan => rademacher_candidates(op, set, &accept),
            Strategy::Auto => unreachable!(),
        };
        match attempt {
            Ok(candidates) => {
                for x in candidates {
                    let v = op.image_norm(&x)?;
                    if accept(v) {
                        return Ok(SmallSign {
                            sign: x,
                            norm: v,
                            strategy: s,
                        });
                    }
                    keep(x, v);
                }
            }
            Err(e @ (Error::SetTooLarge { .. } | Error::UnequalWeights)) if strategy != Strategy::Auto => {
                last_err = Some(e);
            }
            Err(Error::SetTooLarge { .. } | Error::UnequalWeights | Error::NoFeasibleSign) => {}
            Err(e) => return Err(e),
        }
    }
    if best.is_none() {
        if let Some(e) = last_err {
            return Err(e);
        }
    }
    Err(Error::NoSignFound {
        threshold: epsilon,
        best: best.map(|(sign, norm)| Box::new(BestSign { sign, norm })),
    })
}

/// Pair atoms with equal weight and identical columns as `(+1, −1)`; the
/// image is exactly zero. Needs every such class to have even size.
fn kernel_pairing(op: &DiscreteOperator, set: &AtomSet) -> Result<SignVector> {
    let mut groups: BTreeMap<(u64, Vec<u64>), Vec<usize>> = BTreeMap::new();
    for i in set.iter() {
        let bits = op.column(i).iter().map(|v| v.to_bits()).collect();
        groups.entry((op.space().numerators()[i], bits)).or_default().push(i);
    }
    if groups.values().any(|g| g.len() % 2 != 0) {
        return Err(Error::NoFeasibleSign);
    }
    let mut x = SignVector::zeros(op.atoms());
    for g in groups.values() {
        for pair in g.chunks(2) {
            x.set(pair[0], 1);
            x.set(pair[1], -1);
        }
    }
    Ok(x)
}

/// Rademacher signs on `set` by increasing level, stopping at the first
/// accepted one.
fn rademacher_candidates(
    op: &DiscreteOperator,
    set: &AtomSet,
    accept: &dyn Fn(f64) -> bool,
) -> Result<Vec<SignVector>> {
    if !op.space().has_equal_weights(set) {
        return Err(Error::UnequalWeights);
    }
    let mut out = Vec::new();
    for level in 1..=max_rademacher_level(set) {
        let r = rademacher_sign(op.space(), set, level)?;
        let small = accept(op.image_norm(&r)?);
        out.push(r);
        if small {
            break;
        }
    }
    if out.is_empty() {
        return Err(Error::NoFeasibleSign);
    }
    Ok(out)
}

/// Refine `op` with `splits`, checking the atom budget.
pub fn refine_operator(
    op: &DiscreteOperator,
    splits: &[(usize, usize)],
    budget: usize,
) -> Result<(DiscreteOperator, Refinement)> {
    if splits.is_empty() {
        return Ok((op.clone(), Refinement::identity(op.atoms())));
    }
    let extra: usize = splits.iter().map(|&(_, p)| p - 1).sum();
    if op.atoms() + extra > budget {
        return Err(Error::RefinementBudgetExceeded {
            atoms: op.atoms() + extra,
            budget,
        });
    }
    let (space, map) = op.space().refine_many(splits)?;
    let refined = op.refined(Arc::new(space), &map)?;
    Ok((refined, map))
}

/// [`find_small_sign`], refining the atoms of `set` and retrying until a sign
/// is found or the atom budget runs out.
pub fn find_small_sign_refining(
    op: &DiscreteOperator,
    set: &AtomSet,
    epsilon: f64,
    strategy: Strategy,
    budget: usize,
) -> Result<RefinedSmallSign> {
    let mut current = op.clone();
    let mut set = set.clone();
    let mut history = Refinement::identity(op.atoms());
    loop {
        let err = match find_small_sign(&current, &set, epsilon, strategy) {
            Ok(found) => {
                return Ok(RefinedSmallSign {
                    sign: found.sign,
                    norm: found.norm,
                    strategy: found.strategy,
                    operator: current,
                    refinement: history,
                })
            }
            Err(e @ (Error::NoSignFound { .. } | Error::UnequalWeights)) => e,
            Err(e) => return Err(e),
        };
        let splits = if strategy == Strategy::RademacherScan && !current.space().has_equal_weights(&set) {
            uniformizing_splits(current.space(), &set)?
        } else {
            set.iter().map(|i| (i, 2)).collect()
        };
        let extra: usize = splits.iter().map(|&(_, p)| p - 1).sum();
        if current.atoms() + extra > budget {
            return Err(err);
        }
        let (next, map) = refine_operator(&current, &splits, budget)?;
        set = map.lift_set(&set);
        history = history.then(&map);
        current = next;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub atoms: AtomSet,
    /// Certified bound on `‖Tx‖` over signs supported in the cell.
    pub bound: f64,
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub epsilon: f64,
    pub cells: Vec<Cell>,
}

impl Partition {
    pub fn max_bound(&self) -> f64 {
        self.cells.iter().map(|c| c.bound).fold(0.0, f64::max)
    }

    pub fn within_epsilon(&self) -> bool {
        self.cells.iter().all(|c| c.bound <= self.epsilon)
    }

    /// Cells are pairwise disjoint and cover `0..atoms`.
    pub fn is_partition_of(&self, atoms: usize) -> bool {
        let mut seen = vec![false; atoms];
        for cell in &self.cells {
            for i in cell.atoms.iter() {
                if i >= atoms || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

fn describe_cell(op: &DiscreteOperator, atoms: AtomSet, greedy_bound: f64) -> Result<Cell> {
    let b = op.max_sign_image_norm_within(&atoms, EXACT_CELL_LIMIT)?;
    let (bound, exact) = if b.exact {
        (b.value, true)
    } else {
        (greedy_bound.min(b.value), false)
    };
    Ok(Cell { atoms, bound, exact })
}

/// Greedy first-fit-decreasing partition into cells on which every sign has
/// image at most `epsilon`. Fails with `AtomTooLarge` on the first atom whose
/// own bound exceeds `epsilon`.
pub fn partition_small_cells(op: &DiscreteOperator, epsilon: f64) -> Result<Partition> {
    let norms: Vec<f64> = (0..op.atoms()).map(|i| op.column_norm(i)).collect();
    if let Some(atom) = (0..op.atoms()).find(|&i| norms[i] > epsilon) {
        return Err(Error::AtomTooLarge {
            atom,
            bound: norms[atom],
            epsilon,
        });
    }
    let mut order: Vec<usize> = (0..op.atoms()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut bounds: Vec<f64> = Vec::new();
    if let TargetNorm::Sup { weights } = op.target() {
        let rows = op.target_dim();
        let w = |r: usize| weights.as_ref().map_or(1.0, |w| w[r]);
        let mut sums: Vec<Vec<f64>> = Vec::new();
        for &i in &order {
            let col: Vec<f64> = (0..rows).map(|r| w(r) * op.matrix()[(r, i)].abs()).collect();
            let slot = sums
                .iter()
                .position(|s| s.iter().zip(&col).all(|(a, b)| a + b <= epsilon));
            match slot {
                Some(k) => {
                    for (a, b) in sums[k].iter_mut().zip(&col) {
                        *a += b;
                    }
                    members[k].push(i);
                }
                None => {
                    sums.push(col);
                    members.push(vec![i]);
                }
            }
        }
        bounds = sums.iter().map(|s| s.iter().copied().fold(0.0, f64::max)).collect();
    } else {
        for &i in &order {
            match bounds.iter().position(|&b| b + norms[i] <= epsilon) {
                Some(k) => {
                    bounds[k] += norms[i];
                    members[k].push(i);
                }
                None => {
                    bounds.push(norms[i]);
                    members.push(vec![i]);
                }
            }
        }
    }
    let cells = members
        .into_iter()
        .zip(bounds)
        .map(|(m, b)| describe_cell(op, AtomSet::new(m), b))
        .collect::<Result<Vec<_>>>()?;
    Ok(Partition { epsilon, cells })
}

/// [`partition_small_cells`], halving atoms that are too large until the
/// partition exists or the atom budget runs out.
pub fn partition_small_cells_refining(
    op: &DiscreteOperator,
    epsilon: f64,
    budget: usize,
) -> Result<(Partition, DiscreteOperator, Refinement)> {
    let mut current = op.clone();
    let mut history = Refinement::identity(op.atoms());
    loop {
        match partition_small_cells(&current, epsilon) {
            Ok(p) => return Ok((p, current, history)),
            Err(Error::AtomTooLarge { .. }) => {
                let splits: Vec<(usize, usize)> = (0..current.atoms())
                    .filter(|&i| current.column_norm(i) > epsilon)
                    .map(|i| (i, 2))
                    .collect();
                let (next, map) = refine_operator(&current, &splits, budget)?;
                history = history.then(&map);
                current = next;
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Clone, Debug)]
pub enum AdversaryOutcome {
    /// Signs with pairwise disjoint supports, each with `‖Tx‖ ≥ ε/2`, over
    /// the space of `operator`.
    Disjoint {
        signs: Vec<SignVector>,
        norms: Vec<f64>,
        operator: DiscreteOperator,
        refinement: Refinement,
    },
    /// No further large sign could be produced; the partition (over the
    /// space of `operator`) certifies the small-cell alternative.
    Exhausted {
        partition: Partition,
        operator: DiscreteOperator,
        refinement: Refinement,
    },
}

const MAX_SPLIT_REFINEMENTS: usize = 64;

/// Inductive construction of `count` disjoint signs with images at least
/// `ε/2`. Returns `Exhausted` at once when [`partition_small_cells`]
/// succeeds at `epsilon`.
pub fn adversarial_disjoint_signs(op: &DiscreteOperator, epsilon: f64, count: usize) -> Result<AdversaryOutcome> {
    adversarial_disjoint_signs_within(op, epsilon, count, DEFAULT_ATOM_BUDGET)
}

pub fn adversarial_disjoint_signs_within(
    op: &DiscreteOperator,
    epsilon: f64,
    count: usize,
    budget: usize,
) -> Result<AdversaryOutcome> {
    if count == 0 {
        return Err(Error::InvalidInput("count must be at least 1".into()));
    }
    if let Ok(partition) = partition_small_cells(op, epsilon) {
        return Ok(AdversaryOutcome::Exhausted {
            partition,
            operator: op.clone(),
            refinement: Refinement::identity(op.atoms()),
        });
    }
    let half = epsilon / 2.0;
    let mut state = Adversary {
        op: op.clone(),
        history: Refinement::identity(op.atoms()),
        signs: Vec::new(),
        budget,
    };
    while state.signs.len() < count {
        let used = state.used();
        let remainder = state.op.space().full_set().difference(&used);
        if let Some(x) = large_sign_on(&state.op, &remainder, half)? {
            state.signs.push(x);
            continue;
        }
        if state.split_one(epsilon)? {
            continue;
        }
        let mut cells: Vec<AtomSet> = state.signs.iter().map(SignVector::support).collect();
        if !remainder.is_empty() {
            cells.push(remainder);
        }
        let cells = cells
            .into_iter()
            .map(|c| {
                let b = state.op.column_norm_sum(&c);
                describe_cell(&state.op, c, b)
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(AdversaryOutcome::Exhausted {
            partition: Partition { epsilon, cells },
            operator: state.op,
            refinement: state.history,
        });
    }
    let norms = state
        .signs
        .iter()
        .map(|x| state.op.image_norm(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(AdversaryOutcome::Disjoint {
        signs: state.signs,
        norms,
        operator: state.op,
        refinement: state.history,
    })
}

struct Adversary {
    op: DiscreteOperator,
    history: Refinement,
    signs: Vec<SignVector>,
    budget: usize,
}

impl Adversary {
    fn used(&self) -> AtomSet {
        self.signs.iter().flat_map(|x| x.support().indices().to_vec()).collect()
    }

    fn refine(&mut self, splits: &[(usize, usize)]) -> Result<Refinement> {
        let (next, map) = refine_operator(&self.op, splits, self.budget)?;
        for x in &mut self.signs {
            *x = map.lift_sign(x);
        }
        self.history = self.history.then(&map);
        self.op = next;
        Ok(map)
    }

    /// Replace one sign whose support carries a sign of image above `ε` by
    /// two disjoint restrictions of image at least `ε/2` each.
    fn split_one(&mut self, epsilon: f64) -> Result<bool> {
        let half = epsilon / 2.0;
        for k in 0..self.signs.len() {
            let support = self.signs[k].support();
            let mut z = match largest_sign_on(&self.op, &support)? {
                Some((z, v)) if v > epsilon => z,
                _ => continue,
            };
            for _ in 0..MAX_SPLIT_REFINEMENTS {
                let atoms = z.support();
                let mut prefix = SignVector::zeros(self.op.atoms());
                let mut straddle = None;
                for i in atoms.iter() {
                    prefix.set(i, z.get(i));
                    if self.op.image_norm(&prefix)? >= half {
                        straddle = Some(i);
                        break;
                    }
                }
                let Some(a) = straddle else { break };
                let rest = z.restrict(&atoms.difference(&prefix.support()));
                if !rest.is_zero() && self.op.image_norm(&rest)? >= half {
                    self.signs[k] = prefix;
                    self.signs.push(rest);
                    return Ok(true);
                }
                let map = self.refine(&[(a, 2)])?;
                z = map.lift_sign(&z);
            }
        }
        Ok(false)
    }
}

/// A sign on `set` with image at least `threshold`, built from as few atoms
/// as the greedy allows.
fn large_sign_on(op: &DiscreteOperator, set: &AtomSet, threshold: f64) -> Result<Option<SignVector>> {
    if set.is_empty() {
        return Ok(None);
    }
    let norms: Vec<(usize, f64)> = set.iter().map(|i| (i, op.column_norm(i))).collect();
    let top = norms.iter().fold(None::<(usize, f64)>, |acc, &(i, v)| match acc {
        Some((_, b)) if b >= v => acc,
        _ => Some((i, v)),
    });
    if let Some((i, v)) = top {
        if v >= threshold {
            let mut x = SignVector::zeros(op.atoms());
            x.set(i, 1);
            return Ok(Some(x));
        }
    }
    if let Some((row, _, _)) = op.sup_maximizing_sign(set) {
        let r = op.matrix().row(row);
        let mut order: Vec<usize> = set.iter().filter(|&i| r[i] != 0.0).collect();
        order.sort_by(|&a, &b| r[b].abs().total_cmp(&r[a].abs()).then(a.cmp(&b)));
        let mut x = SignVector::zeros(op.atoms());
        for i in order {
            x.set(i, if r[i] < 0.0 { -1 } else { 1 });
            if op.image_norm(&x)? >= threshold {
                return Ok(Some(x));
            }
        }
        return Ok(None);
    }
    let mut order: Vec<(usize, f64)> = norms;
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut x = SignVector::zeros(op.atoms());
    let mut image = vec![0.0; op.target_dim()];
    for (i, _) in order {
        let col = op.column(i);
        let plus: Vec<f64> = image.iter().zip(&col).map(|(a, b)| a + b).collect();
        let minus: Vec<f64> = image.iter().zip(&col).map(|(a, b)| a - b).collect();
        if op.norm(&minus) > op.norm(&plus) {
            x.set(i, -1);
            image = minus;
        } else {
            x.set(i, 1);
            image = plus;
        }
        if op.image_norm(&x)? >= threshold {
            return Ok(Some(x));
        }
    }
    if let Some((z, v)) = largest_sign_on(op, set)? {
        if v >= threshold {
            return Ok(Some(z));
        }
    }
    Ok(None)
}

/// A sign supported in `set` maximizing (or, on large sets, greedily
/// enlarging) `‖Tx‖`.
fn largest_sign_on(op: &DiscreteOperator, set: &AtomSet) -> Result<Option<(SignVector, f64)>> {
    if set.is_empty() {
        return Ok(None);
    }
    if let Some((_, z, _)) = op.sup_maximizing_sign(set) {
        let v = op.image_norm(&z)?;
        return Ok(Some((z, v)));
    }
    let support = if op.target().is_locally_convex() {
        Support::Full
    } else {
        Support::Subset
    };
    let search = SignSearch {
        support,
        mean_zero: false,
        objective: Objective::Max,
    };
    match op.brute_force_best_sign(set, search) {
        Ok(found) => Ok(Some(found)),
        Err(Error::SetTooLarge { .. }) => {
            let mut x = SignVector::zeros(op.atoms());
            let mut image = vec![0.0; op.target_dim()];
            for i in set.iter() {
                let col = op.column(i);
                let plus: Vec<f64> = image.iter().zip(&col).map(|(a, b)| a + b).collect();
                let minus: Vec<f64> = image.iter().zip(&col).map(|(a, b)| a - b).collect();
                if op.norm(&minus) > op.norm(&plus) {
                    x.set(i, -1);
                    image = minus;
                } else {
                    x.set(i, 1);
                    image = plus;
                }
            }
            let v = op.image_norm(&x)?;
            Ok(Some((x, v)))
        }
        Err(e) => Err(e),
    }
}

/// Greedy net: a point opens a new center unless an existing center lies
/// within `radius`.
pub fn net_cover(points: &[Vec<f64>], radius: f64, norm: &TargetNorm) -> Result<NetCover> {
    if !(radius > 0.0) {
        return Err(Error::InvalidInput(format!(
            "net radius must be positive, got {radius}"
        )));
    }
    let mut cover = NetCover {
        centers: Vec::new(),
        radius,
        sources: Vec::new(),
        assignment: Vec::with_capacity(points.len()),
    };
    for (p, y) in points.iter().enumerate() {
        if let Some(first) = cover.centers.first() {
            if first.len() != y.len() {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    found: y.len(),
                });
            }
        }
        match cover.centers.iter().position(|c| distance(norm, c, y) <= radius) {
            Some(c) => cover.assignment.push(c),
            None => {
                cover.assignment.push(cover.centers.len());
                cover.centers.push(y.clone());
                cover.sources.push(p);
            }
        }
    }
    Ok(cover)
}

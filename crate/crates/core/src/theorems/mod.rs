//! End-to-end constructions of a mean-zero sign that is simultaneously small
//! for two operators, with certified reports.

mod compact;
mod finite_rank;
mod pairing;

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{AtomSet, MeasureSpace, Refinement, SignVector};
use crate::narrowness::{find_sign_within, refine_operator, Strategy, DEFAULT_ATOM_BUDGET};
use crate::operators::DiscreteOperator;
use crate::spaces::TargetNorm;

pub use compact::{sum_compact_locally_convex, sum_compact_via_truncation, sum_compact_via_truncation_with, TailBound};
pub use finite_rank::sum_finite_rank;
pub use pairing::pairing_construction;

pub const DEFAULT_RANK_LIMIT: usize = 16;

fn default_rounds() -> usize {
    5
}

fn default_budget() -> usize {
    DEFAULT_ATOM_BUDGET
}

fn default_rank_limit() -> usize {
    DEFAULT_RANK_LIMIT
}

fn default_samples() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineParams {
    /// Budget for `‖T₁x‖`.
    pub sigma: f64,
    /// Budget for `‖T₂x‖`.
    pub epsilon: f64,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    /// Overrides the net radius of the pipeline when set.
    #[serde(default)]
    pub net_radius: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rounds")]
    pub max_adaptive_rounds: usize,
    #[serde(default = "default_budget")]
    pub atom_budget: usize,
    #[serde(default = "default_rank_limit")]
    pub rank_limit: usize,
    #[serde(default = "default_samples")]
    pub random_samples: usize,
    #[serde(default)]
    pub strategy: Strategy,
}

impl PipelineParams {
    pub fn new(sigma: f64, epsilon: f64) -> Self {
        PipelineParams {
            sigma,
            epsilon,
            gamma: None,
            delta: None,
            net_radius: None,
            seed: 0,
            max_adaptive_rounds: default_rounds(),
            atom_budget: DEFAULT_ATOM_BUDGET,
            rank_limit: DEFAULT_RANK_LIMIT,
            random_samples: default_samples(),
            strategy: Strategy::Auto,
        }
    }

    pub fn with_gamma_delta(mut self, gamma: f64, delta: f64) -> Self {
        self.gamma = Some(gamma);
        self.delta = Some(delta);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("sigma", self.sigma)?;
        positive("epsilon", self.epsilon)?;
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < self.epsilon) {
                return Err(Error::InvalidInput(format!("gamma must lie in (0, epsilon), got {g}")));
            }
        }
        if let Some(d) = self.delta {
            positive("delta", d)?;
        }
        if let Some(r) = self.net_radius {
            positive("net_radius", r)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostic {
    pub stage: usize,
    pub label: String,
    pub atoms: usize,
    pub measure: f64,
    pub t1_norm: f64,
    pub t1_budget: f64,
    pub t2_norm: Option<f64>,
    pub t2_budget: Option<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub sigma: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub epsilon: f64,
    pub cells: usize,
    pub max_bound: f64,
    pub exact_cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundingSummary {
    pub dimension: usize,
    pub vectors: usize,
    pub achieved: f64,
    pub certificate: f64,
    pub delta: f64,
    pub elimination_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationSummary {
    pub samples: usize,
    pub large_images: usize,
    pub centers: usize,
    pub net_radius: f64,
    /// Largest `sup_{‖v‖ ≤ radius} |f_k(v)|` over the functionals.
    pub max_functional_on_ball: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationSummary {
    pub level: usize,
    pub tail_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub pipeline: String,
    pub status: String,
    /// Final sign over `space`.
    pub sign: SignVector,
    pub space: MeasureSpace,
    /// Child offsets from the input space to `space`.
    pub atom_map: Vec<usize>,
    pub achieved_t1: f64,
    pub achieved_t2: f64,
    pub budgets: Budgets,
    pub rank: Option<usize>,
    pub partition: Option<PartitionSummary>,
    pub rounding: Option<RoundingSummary>,
    pub separation: Option<SeparationSummary>,
    pub truncation: Option<TruncationSummary>,
    pub stages: Vec<StageDiagnostic>,
    pub adaptive_rounds: usize,
    pub refinements: usize,
}

impl PipelineReport {
    pub fn refinement(&self) -> Result<Refinement> {
        Refinement::from_offsets(self.atom_map.clone())
    }

    /// One CSV row per stage.
    pub fn write_stage_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_stage_csv(&self.stages, writer)
    }
}

pub fn write_stage_csv<W: Write>(stages: &[StageDiagnostic], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    if stages.is_empty() {
        wtr.write_record([
            "stage",
            "label",
            "atoms",
            "measure",
            "t1_norm",
            "t1_budget",
            "t2_norm",
            "t2_budget",
            "detail",
        ])?;
    }
    for s in stages {
        wtr.serialize(s)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Independent re-evaluation of a report against the input operators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Revalidation {
    pub t1_norm: f64,
    pub t2_norm: f64,
    pub mean_zero: bool,
}

/// The step function on the input space with the same integrals over input
/// atoms as `sign`, i.e. its conditional expectation.
pub fn coarsen(sign: &SignVector, fine: &MeasureSpace, coarse: &MeasureSpace, map: &Refinement) -> Result<Vec<f64>> {
    if map.old_len() != coarse.len() || map.new_len() != fine.len() || sign.len() != fine.len() {
        return Err(Error::DimensionMismatch {
            expected: fine.len(),
            found: sign.len(),
        });
    }
    let shift = fine
        .denominator_log2()
        .checked_sub(coarse.denominator_log2())
        .ok_or_else(|| Error::InvalidInput("refined space has a coarser grid".into()))?;
    (0..coarse.len())
        .map(|i| {
            let num: i128 = map
                .children(i)
                .map(|c| sign.get(c) as i128 * fine.numerators()[c] as i128)
                .sum();
            let den = (coarse.numerators()[i] as i128)
                .checked_shl(shift)
                .ok_or(Error::Overflow)?;
            Ok(num as f64 / den as f64)
        })
        .collect()
}

/// Apply the input operators to the reported sign, through its conditional
/// expectation on the input atoms.
pub fn revalidate(report: &PipelineReport, t1: &DiscreteOperator, t2: &DiscreteOperator) -> Result<Revalidation> {
    let map = report.refinement()?;
    let step = coarsen(&report.sign, &report.space, t1.space(), &map)?;
    Ok(Revalidation {
        t1_norm: t1.norm(&t1.apply(&step)?),
        t2_norm: t2.norm(&t2.apply(&step)?),
        mean_zero: report.space.is_mean_zero(&report.sign),
    })
}

/// Certified bound on `sup{‖T1_A‖ : μ(A) ≤ δ}` and a witness set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsoluteContinuity {
    pub delta: f64,
    /// Fractional-knapsack upper bound.
    pub bound: f64,
    /// `‖T1_W‖` for the witness set `W`.
    pub witness_value: f64,
    pub witness: AtomSet,
}

/// Fractional and integral greedy knapsack over `(atom, value)` items with
/// atom weights as costs.
fn knapsack(op: &DiscreteOperator, items: &mut [(usize, f64)], capacity: f64) -> (f64, Vec<usize>) {
    let w = |i: usize| op.space().weight_f64(i);
    items.sort_by(|a, b| (b.1 / w(b.0)).total_cmp(&(a.1 / w(a.0))).then(a.0.cmp(&b.0)));
    let mut left = capacity;
    let mut bound = 0.0;
    for &(i, v) in items.iter() {
        if left <= 0.0 {
            break;
        }
        let take = (left / w(i)).min(1.0);
        bound += take * v;
        left -= take * w(i);
    }
    let mut used = 0.0;
    let mut chosen = Vec::new();
    for &(i, _) in items.iter() {
        if used + w(i) <= capacity {
            used += w(i);
            chosen.push(i);
        }
    }
    (bound, chosen)
}

pub fn check_absolute_continuity(op: &DiscreteOperator, delta: f64) -> Result<AbsoluteContinuity> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("delta must be positive, got {delta}")));
    }
    let mut best = AbsoluteContinuity {
        delta,
        bound: 0.0,
        witness_value: 0.0,
        witness: AtomSet::empty(),
    };
    let mut consider = |bound: f64, chosen: Vec<usize>| -> Result<()> {
        best.bound = best.bound.max(bound);
        let set = AtomSet::new(chosen);
        let value = op.indicator_image_norm(&set)?;
        if value > best.witness_value {
            best.witness_value = value;
            best.witness = set;
        }
        Ok(())
    };
    if let TargetNorm::Sup { weights } = op.target() {
        for r in 0..op.target_dim() {
            let w = weights.as_ref().map_or(1.0, |w| w[r]);
            let row = op.matrix().row(r);
            for s in [1.0, -1.0] {
                let mut items: Vec<(usize, f64)> = (0..op.atoms())
                    .filter(|&i| s * row[i] > 0.0)
                    .map(|i| (i, w * row[i].abs()))
                    .collect();
                let (bound, chosen) = knapsack(op, &mut items, delta);
                consider(bound, chosen)?;
            }
        }
    } else {
        let mut items: Vec<(usize, f64)> = (0..op.atoms())
            .map(|i| (i, op.column_norm(i)))
            .filter(|&(_, v)| v > 0.0)
            .collect();
        let (bound, chosen) = knapsack(op, &mut items, delta);
        consider(bound, chosen)?;
    }
    Ok(best)
}

/// Operators sharing one measure space, refined together.
pub(crate) struct Workspace {
    pub ops: Vec<DiscreteOperator>,
    pub history: Refinement,
    pub budget: usize,
    pub refinements: usize,
}

impl Workspace {
    pub fn new(ops: Vec<DiscreteOperator>, budget: usize) -> Result<Self> {
        let first = ops
            .first()
            .ok_or_else(|| Error::InvalidInput("workspace needs an operator".into()))?;
        let space = first.space().clone();
        let mut shared = Vec::with_capacity(ops.len());
        for op in ops {
            if **op.space() != *space {
                return Err(Error::InvalidInput("operators act on different measure spaces".into()));
            }
            shared.push(DiscreteOperator::new(
                op.matrix().clone(),
                space.clone(),
                op.target().clone(),
            )?);
        }
        if space.len() > budget {
            return Err(Error::RefinementBudgetExceeded {
                atoms: space.len(),
                budget,
            });
        }
        Ok(Workspace {
            history: Refinement::identity(space.len()),
            ops: shared,
            budget,
            refinements: 0,
        })
    }

    pub fn space(&self) -> &Arc<MeasureSpace> {
        self.ops[0].space()
    }

    pub fn atoms(&self) -> usize {
        self.space().len()
    }

    /// Refine every operator; returns the step map.
    pub fn refine(&mut self, splits: &[(usize, usize)]) -> Result<Refinement> {
        if splits.is_empty() {
            return Ok(Refinement::identity(self.atoms()));
        }
        let (first, map) = refine_operator(&self.ops[0], splits, self.budget)?;
        let space = first.space().clone();
        let mut next = vec![first];
        for op in &self.ops[1..] {
            next.push(op.refined(space.clone(), &map)?);
        }
        self.ops = next;
        self.history = self.history.then(&map);
        self.refinements += 1;
        Ok(map)
    }

    /// Mean-zero sign on `set` with `‖T_which x‖ ≤ budget`, halving the atoms
    /// of `set` until one is found. Returns the sign and the refinement made
    /// along the way.
    pub fn small_sign(
        &mut self,
        which: usize,
        set: &AtomSet,
        budget: f64,
        strategy: Strategy,
    ) -> Result<(SignVector, f64, Refinement)> {
        let mut set = set.clone();
        let mut made = Refinement::identity(self.atoms());
        loop {
            match find_sign_within(&self.ops[which], &set, budget, strategy) {
                Ok(found) => return Ok((found.sign, found.norm, made)),
                Err(Error::NoSignFound { .. } | Error::UnequalWeights) => {
                    let splits = if strategy == Strategy::RademacherScan && !self.space().has_equal_weights(&set) {
                        crate::measure::uniformizing_splits(self.space(), &set)?
                    } else {
                        set.iter().map(|i| (i, 2)).collect()
                    };
                    let step = self.refine(&splits)?;
                    set = step.lift_set(&set);
                    made = made.then(&step);
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// [`Workspace::small_sign`] for many disjoint cells at once: every
    /// round searches all open cells, then halves the atoms of the failures in
    /// one refinement. `cells` are lifted in place; signs are over the final
    /// space.
    pub fn small_signs(
        &mut self,
        which: usize,
        cells: &mut [AtomSet],
        budgets: &[f64],
        strategy: Strategy,
    ) -> Result<Vec<(SignVector, f64)>> {
        let mut found: Vec<Option<(SignVector, f64)>> = vec![None; cells.len()];
        loop {
            let mut splits = Vec::new();
            for (k, cell) in cells.iter().enumerate() {
                if found[k].is_some() {
                    continue;
                }
                match find_sign_within(&self.ops[which], cell, budgets[k], strategy) {
                    Ok(f) => found[k] = Some((f.sign, f.norm)),
                    Err(Error::NoSignFound { .. } | Error::UnequalWeights) => {
                        if strategy == Strategy::RademacherScan && !self.space().has_equal_weights(cell) {
                            splits.extend(crate::measure::uniformizing_splits(self.space(), cell)?);
                        } else {
                            splits.extend(cell.iter().map(|i| (i, 2)));
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
            if splits.is_empty() {
                return Ok(found.into_iter().map(|f| f.expect("every cell resolved")).collect());
            }
            splits.sort_unstable();
            let step = self.refine(&splits)?;
            for c in cells.iter_mut() {
                *c = step.lift_set(c);
            }
            for (sign, _) in found.iter_mut().flatten() {
                *sign = step.lift_sign(sign);
            }
        }
    }

    pub fn report(&self, pipeline: &str, sign: SignVector, budgets: Budgets) -> Result<PipelineReport> {
        Ok(PipelineReport {
            pipeline: pipeline.to_string(),
            status: "success".into(),
            achieved_t1: self.ops[0].image_norm(&sign)?,
            achieved_t2: self.ops[1].image_norm(&sign)?,
            sign,
            space: (**self.space()).clone(),
            atom_map: self.history.offsets().to_vec(),
            budgets,
            rank: None,
            partition: None,
            rounding: None,
            separation: None,
            truncation: None,
            stages: Vec::new(),
            adaptive_rounds: 0,
            refinements: self.refinements,
        })
    }
}

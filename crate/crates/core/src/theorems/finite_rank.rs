use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{rank_factorization, Matrix, PIVOT_TOLERANCE};
use crate::measure::SignVector;
use crate::narrowness::{partition_small_cells, Partition};
use crate::operators::DiscreteOperator;
use crate::rounding::{combination, sign_round};
use crate::spaces::TargetNorm;

use super::{Budgets, PartitionSummary, PipelineParams, PipelineReport, RoundingSummary, StageDiagnostic, Workspace};

/// Mean-zero sign `x` with `‖T₁x‖ ≤ σ` and `‖T₂x‖ ≤ ε` for a finite-rank `T₂`.
///
/// With `m = rank T₂` and `p` the sup norm of coordinates in a unit-norm basis
/// of the range, every cell of a partition carries only signs with
/// `p(T₂x) ≤ δ/(2m)`. Each cell gets a mean-zero sign `x_k` with
/// `‖T₁x_k‖ ≤ σ/2^k`, and sign rounding of the vectors `T₂x_k` in `p` picks
/// `θ_k = ±1` with `p(Σθ_k T₂x_k) ≤ δ`.
pub fn sum_finite_rank(
    t1: &DiscreteOperator,
    t2: &DiscreteOperator,
    params: &PipelineParams,
) -> Result<PipelineReport> {
    params.validate()?;
    let (sigma, epsilon) = (params.sigma, params.epsilon);
    let mut ws = Workspace::new(vec![t1.clone(), t2.clone()], params.atom_budget)?;
    let pipeline_budgets = Budgets { sigma, epsilon };

    let factor = rank_factorization(t2.matrix(), PIVOT_TOLERANCE);
    let m = factor.pivots.len();
    if m > params.rank_limit {
        return Err(Error::RankTooLarge {
            rank: m,
            limit: params.rank_limit,
        });
    }
    if m == 0 {
        let full = ws.space().full_set();
        let (x, n1, _) = ws.small_sign(0, &full, sigma, params.strategy)?;
        let mut report = ws.report("sum_finite_rank", x, pipeline_budgets)?;
        report.rank = Some(0);
        report.stages.push(StageDiagnostic {
            stage: 1,
            label: "cell".into(),
            atoms: ws.atoms(),
            measure: ws.space().total().to_f64(),
            t1_norm: n1,
            t1_budget: sigma,
            t2_norm: Some(report.achieved_t2),
            t2_budget: None,
            detail: "rank 0".into(),
        });
        return finish(report, sigma, epsilon);
    }

    // unit-norm basis of the range and coefficients in it
    let norm = t2.target();
    let h = norm.homogeneity();
    let mut basis = Vec::with_capacity(m);
    let mut coeff = Matrix::zeros(m, t2.atoms());
    for (j, &p) in factor.pivots.iter().enumerate() {
        let col = t2.column(p);
        let size = norm.eval(&col);
        let scale = size.powf(1.0 / h);
        basis.push(col.iter().map(|v| v / scale).collect::<Vec<f64>>());
        for i in 0..t2.atoms() {
            coeff[(j, i)] = factor.coefficients[(j, i)] * scale;
        }
    }
    let basis_matrix = Matrix::from_columns(t2.target_dim(), &basis)?;
    let rebuilt = basis_matrix.mul(&coeff)?;
    let residual: f64 = (0..t2.atoms())
        .map(|i| {
            let diff: Vec<f64> = t2.column(i).iter().zip(rebuilt.column(i)).map(|(a, b)| a - b).collect();
            norm.eval(&diff)
        })
        .sum();
    // p(c) ≤ δ ⇒ ‖Σ c_j b_j‖ ≤ m δ^h; the factorization residual is added on top
    let slack = epsilon - residual;
    if !(slack > 0.0) {
        return Err(Error::StageFailed {
            stage: 0,
            reason: format!("factorization residual {residual} leaves no room below epsilon"),
        });
    }
    let delta = (slack / m as f64).powf(1.0 / h);
    let cell_budget = delta / (2.0 * m as f64);

    let cop = DiscreteOperator::new(coeff, t2.space().clone(), TargetNorm::sup())?;
    ws.ops.push(cop);
    let mut partition = loop {
        match partition_small_cells(&ws.ops[2], cell_budget) {
            Ok(p) => break p,
            Err(Error::AtomTooLarge { .. }) => {
                let c = &ws.ops[2];
                let splits: Vec<(usize, usize)> = (0..c.atoms())
                    .filter(|&i| c.column_norm(i) > cell_budget)
                    .map(|i| (i, 2))
                    .collect();
                ws.refine(&splits)?;
            }
            Err(e) => return Err(e),
        }
    };
    let summary = PartitionSummary {
        epsilon: cell_budget,
        cells: partition.cells.len(),
        max_bound: partition.max_bound(),
        exact_cells: partition.cells.iter().filter(|c| c.exact).count(),
    };
    sort_cells(&mut partition, &ws);

    let mut cells: Vec<_> = partition.cells.into_iter().map(|c| c.atoms).collect();
    let budgets: Vec<f64> = (0..cells.len()).map(|k| sigma / ((k + 1) as f64).exp2()).collect();
    let found = ws.small_signs(0, &mut cells, &budgets, params.strategy)?;
    let mut pieces: Vec<SignVector> = Vec::with_capacity(found.len());
    let mut stages = Vec::with_capacity(found.len());
    for (k, (xk, n1)) in found.into_iter().enumerate() {
        let coeffs = ws.ops[2].apply_sign(&xk)?;
        let p = TargetNorm::sup().eval(&coeffs);
        if p > delta / m as f64 {
            return Err(Error::StageFailed {
                stage: k + 1,
                reason: format!("cell sign has coefficient norm {p} above delta/m"),
            });
        }
        stages.push(StageDiagnostic {
            stage: k + 1,
            label: "cell".into(),
            atoms: cells[k].len(),
            measure: ws.space().measure(&cells[k]).to_f64(),
            t1_norm: n1,
            t1_budget: budgets[k],
            t2_norm: Some(p),
            t2_budget: Some(delta / m as f64),
            detail: "t2_norm is the coefficient norm".into(),
        });
        pieces.push(xk);
    }

    let vectors: Vec<Vec<f64>> = pieces.iter().map(|x| ws.ops[2].apply_sign(x)).collect::<Result<_>>()?;
    let rounded = sign_round(&vectors, &TargetNorm::sup())?;
    let coeffs: Vec<f64> = rounded.signs.iter().map(|&s| s as f64).collect();
    let achieved = TargetNorm::sup().eval(&combination(&vectors, &coeffs));
    if achieved > delta || rounded.achieved > rounded.certificate {
        return Err(Error::StageFailed {
            stage: pieces.len() + 1,
            reason: format!("rounding reached {achieved} above delta {delta}"),
        });
    }
    let mut x = SignVector::zeros(ws.atoms());
    for (p, &s) in pieces.iter().zip(&rounded.signs) {
        let part = if s < 0 { p.negated() } else { p.clone() };
        x = x.disjoint_sum(&part)?;
    }

    ws.ops.truncate(2);
    let mut report = ws.report("sum_finite_rank", x, pipeline_budgets)?;
    report.rank = Some(m);
    report.partition = Some(summary);
    report.rounding = Some(RoundingSummary {
        dimension: m,
        vectors: vectors.len(),
        achieved,
        certificate: rounded.certificate,
        delta,
        elimination_steps: rounded.elimination_steps,
    });
    report.stages = stages;
    finish(report, sigma, epsilon)
}

/// Cells by decreasing measure, ties by first atom.
fn sort_cells(partition: &mut Partition, ws: &Workspace) {
    let space: Arc<_> = ws.space().clone();
    partition.cells.sort_by(|a, b| {
        space
            .measure(&b.atoms)
            .cmp(&space.measure(&a.atoms))
            .then(a.atoms.indices().first().cmp(&b.atoms.indices().first()))
    });
}

fn finish(report: PipelineReport, sigma: f64, epsilon: f64) -> Result<PipelineReport> {
    if !report.space.is_mean_zero(&report.sign) {
        return Err(Error::StageFailed {
            stage: report.stages.len() + 1,
            reason: "combined sign is not mean zero".into(),
        });
    }
    if report.achieved_t1 > sigma || report.achieved_t2 > epsilon {
        return Err(Error::StageFailed {
            stage: report.stages.len() + 1,
            reason: format!(
                "combined sign has norms ({}, {}) above ({sigma}, {epsilon})",
                report.achieved_t1, report.achieved_t2
            ),
        });
    }
    Ok(report)
}

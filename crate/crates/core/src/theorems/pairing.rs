use crate::error::{Error, Result};
use crate::measure::{max_rademacher_level, rademacher_sign, uniformizing_splits, AtomSet, SignVector};
use crate::narrowness::net_cover;
use crate::operators::DiscreteOperator;

use super::{check_absolute_continuity, Budgets, PipelineParams, PipelineReport, StageDiagnostic, Workspace};

/// Mean-zero sign `x` with `‖T₁x‖ ≤ σ` and `‖T₂x‖ ≤ ε`, when `T₂` maps sets of
/// measure at most `δ` into the `γ/2`-ball.
///
/// Stage `j` takes two Rademacher signs `r, r'` on the remaining set `A_j`
/// with `‖T₁r‖, ‖T₁r'‖ ≤ σ/2^{j+1}` whose `T₂`-images are close, and keeps
/// `x_j = (r − r')/2`, a mean-zero sign on half of `A_j`. After `m` stages
/// the remainder has measure at most `δ` and receives a tail sign `z`.
pub fn pairing_construction(
    t1: &DiscreteOperator,
    t2: &DiscreteOperator,
    params: &PipelineParams,
) -> Result<PipelineReport> {
    params.validate()?;
    let gamma = params
        .gamma
        .ok_or_else(|| Error::InvalidInput("pairing needs gamma".into()))?;
    let delta = params
        .delta
        .ok_or_else(|| Error::InvalidInput("pairing needs delta".into()))?;
    let (sigma, epsilon) = (params.sigma, params.epsilon);

    let continuity = check_absolute_continuity(t2, delta)?;
    if continuity.bound > gamma / 2.0 {
        return Err(Error::PreconditionFailed {
            delta,
            gamma,
            bound: continuity.bound,
            limit: gamma / 2.0,
            witness: continuity.witness.indices().to_vec(),
        });
    }
    let eps1 = epsilon - gamma;

    let mut ws = Workspace::new(vec![t1.clone(), t2.clone()], params.atom_budget)?;
    let total = ws.space().total();
    let mut m = 0u32;
    while total.halved(m).to_f64() > delta {
        m += 1;
    }

    let mut remaining = ws.space().full_set();
    let mut x = SignVector::zeros(ws.atoms());
    let mut supports: Vec<AtomSet> = Vec::new();
    let mut stages = Vec::new();

    for j in 1..=m {
        let t1_budget = sigma / f64::from(j).exp2();
        let t2_budget = eps1 / f64::from(j).exp2();
        let candidate_budget = t1_budget / 2.0;

        let splits = uniformizing_splits(ws.space(), &remaining).map_err(|e| Error::StageFailed {
            stage: j as usize,
            reason: format!("cannot equalize atom weights: {e}"),
        })?;
        lift(&mut ws, &splits, &mut remaining, &mut x, &mut supports)?;

        let (xj, label) = loop {
            if let Some(found) = stage_pair(
                &ws,
                &remaining,
                candidate_budget,
                t1_budget,
                t2_budget,
                params.net_radius,
            )? {
                break found;
            }
            let splits: Vec<(usize, usize)> = remaining.iter().map(|i| (i, 2)).collect();
            lift(&mut ws, &splits, &mut remaining, &mut x, &mut supports).map_err(|e| match e {
                Error::RefinementBudgetExceeded { atoms, budget } => Error::StageFailed {
                    stage: j as usize,
                    reason: format!("no admissible pair within {budget} atoms (needed {atoms})"),
                },
                other => other,
            })?;
        };

        let b = xj.support();
        // (a) disjointness, (b) exact measure, (c) both norm bounds
        if supports.iter().any(|s| !s.is_disjoint(&b)) || !b.difference(&remaining).is_empty() {
            return Err(stage_error(j, "support leaves the remaining set"));
        }
        let space = ws.space();
        let measure: u128 = b.iter().map(|i| space.numerators()[i] as u128).sum();
        let total_num: u128 = space.numerators().iter().map(|&n| n as u128).sum();
        if measure << j != total_num {
            return Err(stage_error(j, "stage support does not have measure μ(Ω)/2^j"));
        }
        if !space.is_mean_zero(&xj) {
            return Err(stage_error(j, "stage sign is not mean zero"));
        }
        let n1 = ws.ops[0].image_norm(&xj)?;
        let n2 = ws.ops[1].image_norm(&xj)?;
        if n1 > t1_budget || n2 >= t2_budget {
            return Err(stage_error(j, "stage sign exceeds its budgets"));
        }
        stages.push(StageDiagnostic {
            stage: j as usize,
            label: "pair".into(),
            atoms: b.len(),
            measure: ws.space().measure(&b).to_f64(),
            t1_norm: n1,
            t1_budget,
            t2_norm: Some(n2),
            t2_budget: Some(t2_budget),
            detail: label,
        });
        remaining = remaining.difference(&b);
        x = x.disjoint_sum(&xj)?;
        supports.push(b);
    }

    let tail_budget = sigma / f64::from(m).exp2();
    let (z, n1) = if remaining.is_empty() {
        (SignVector::zeros(ws.atoms()), 0.0)
    } else {
        let (z, n1, step) = ws.small_sign(0, &remaining, tail_budget, params.strategy)?;
        x = step.lift_sign(&x);
        remaining = step.lift_set(&remaining);
        (z, n1)
    };
    let n2 = ws.ops[1].image_norm(&z)?;
    if n2 > gamma {
        return Err(stage_error(m + 1, "tail sign exceeds gamma"));
    }
    stages.push(StageDiagnostic {
        stage: m as usize + 1,
        label: "tail".into(),
        atoms: remaining.len(),
        measure: ws.space().measure(&remaining).to_f64(),
        t1_norm: n1,
        t1_budget: tail_budget,
        t2_norm: Some(n2),
        t2_budget: Some(gamma),
        detail: format!("delta={delta}"),
    });
    let x = x.disjoint_sum(&z)?;
    if !ws.space().is_mean_zero(&x) {
        return Err(stage_error(m + 1, "combined sign is not mean zero"));
    }

    let mut report = ws.report("pairing", x, Budgets { sigma, epsilon })?;
    if report.achieved_t1 > sigma || report.achieved_t2 > epsilon {
        return Err(stage_error(m + 1, "combined sign exceeds the budgets"));
    }
    report.stages = stages;
    Ok(report)
}

fn stage_error(stage: u32, reason: &str) -> Error {
    Error::StageFailed {
        stage: stage as usize,
        reason: reason.into(),
    }
}

fn lift(
    ws: &mut Workspace,
    splits: &[(usize, usize)],
    remaining: &mut AtomSet,
    x: &mut SignVector,
    supports: &mut [AtomSet],
) -> Result<()> {
    if splits.is_empty() {
        return Ok(());
    }
    let map = ws.refine(splits)?;
    *remaining = map.lift_set(remaining);
    *x = map.lift_sign(x);
    for s in supports.iter_mut() {
        *s = map.lift_set(s);
    }
    Ok(())
}

/// Rademacher candidates on `set` with `‖T₁r‖ ≤ candidate_budget`, paired
/// first inside the cells of a net over their `T₂`-images, then over all
/// pairs. Returns the first pair meeting both stage budgets.
fn stage_pair(
    ws: &Workspace,
    set: &AtomSet,
    candidate_budget: f64,
    t1_budget: f64,
    t2_budget: f64,
    net_radius: Option<f64>,
) -> Result<Option<(SignVector, String)>> {
    let (t1, t2) = (&ws.ops[0], &ws.ops[1]);
    let mut levels = Vec::new();
    let mut signs = Vec::new();
    let mut images = Vec::new();
    for level in 1..=max_rademacher_level(set) {
        let r = rademacher_sign(ws.space(), set, level)?;
        if t1.image_norm(&r)? <= candidate_budget {
            images.push(t2.apply_sign(&r)?);
            signs.push(r);
            levels.push(level);
        }
    }
    if signs.len() < 2 {
        return Ok(None);
    }
    let net = net_cover(&images, net_radius.unwrap_or(t2_budget), t2.target())?;
    let mut order: Vec<(usize, usize)> = Vec::new();
    for group in net.members() {
        for a in 0..group.len() {
            for b in a + 1..group.len() {
                order.push((group[a], group[b]));
            }
        }
    }
    for a in 0..signs.len() {
        for b in a + 1..signs.len() {
            if !order.contains(&(a, b)) {
                order.push((a, b));
            }
        }
    }
    for (a, b) in order {
        let x = signs[a].half_difference(&signs[b]);
        if t2.image_norm(&x)? < t2_budget && t1.image_norm(&x)? <= t1_budget {
            return Ok(Some((x, format!("levels {} and {}", levels[a], levels[b]))));
        }
    }
    Ok(None)
}

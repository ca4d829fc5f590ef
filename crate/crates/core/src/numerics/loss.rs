use super::tape::check_targets;
use super::tensor::Tensor;
use crate::error::Result;

/// Per-row probability split between the ground-truth class and the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDiagnostics {
    /// Probability of the target class, one entry per row.
    pub p_pos: Vec<f64>,
    /// Probabilities of every non-target class, in column order.
    pub p_neg: Vec<Vec<f64>>,
    /// Mean of `-ln p_pos` over rows.
    pub loss: f64,
}

/// Mean softmax cross entropy with max-subtraction.
///
/// Returns the loss, the diagnostics and the full probability matrix.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    targets: &[usize],
) -> Result<(f64, LossDiagnostics, Tensor)> {
    check_targets(logits, targets)?;
    let rows = logits.rows();
    let mut probs = Tensor::zeros(logits.shape());
    let mut p_pos = Vec::with_capacity(rows);
    let mut p_neg = Vec::with_capacity(rows);
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        // log-sum-exp keeps the loss exact when p_target underflows
        total += z.ln() - (row[t] - max);
        let pr = probs.row_mut(r);
        for (p, e) in pr.iter_mut().zip(&exps) {
            *p = e / z;
        }
        p_pos.push(pr[t]);
        p_neg.push(
            pr.iter()
                .enumerate()
                .filter(|&(j, _)| j != t)
                .map(|(_, &p)| p)
                .collect(),
        );
    }
    let loss = total / rows as f64;
    Ok((
        loss,
        LossDiagnostics {
            p_pos,
            p_neg,
            loss,
        },
        probs,
    ))
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MlpParams;
use crate::numerics::{Tensor, NORM_EPS};
use crate::synthdata::{EvalProtocol, TAIL_THRESHOLD};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub accuracy: f64,
    /// Pairs with distance strictly below this are called genuine.
    pub threshold: f64,
}

/// Best-threshold verification accuracy.
///
/// Candidates are the midpoints between consecutive distinct sorted
/// distances plus one threshold below and one above the whole range. Ties in
/// accuracy go to the smaller threshold.
pub fn verification_accuracy(distances: &[f64], genuine: &[bool]) -> Result<VerificationResult> {
    if distances.is_empty() {
        return Err(Error::config("verification needs at least one pair"));
    }
    if distances.len() != genuine.len() {
        return Err(Error::Shape {
            op: "verification_accuracy",
            lhs: vec![distances.len()],
            rhs: vec![genuine.len()],
        });
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("pair distance".into()));
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    let n = order.len();
    let total_genuine = genuine.iter().filter(|&&g| g).count();

    // threshold below everything: all pairs called impostor
    let mut correct = n - total_genuine;
    let mut best = VerificationResult {
        accuracy: correct as f64 / n as f64,
        threshold: distances[order[0]] - 1.0,
    };
    for i in 0..n {
        // move pair order[i] to the genuine side
        correct = if genuine[order[i]] { correct + 1 } else { correct - 1 };
        let d = distances[order[i]];
        let threshold = match order.get(i + 1) {
            Some(&next) if distances[next] == d => continue,
            Some(&next) => 0.5 * (d + distances[next]),
            None => d + 1.0,
        };
        let accuracy = correct as f64 / n as f64;
        if accuracy > best.accuracy {
            best = VerificationResult { accuracy, threshold };
        }
    }
    Ok(best)
}

/// Per-probe rank-1 hits: nearest gallery row by cosine, lowest index on ties.
pub fn identification_hits(
    probes: &Tensor,
    gallery: &Tensor,
    probe_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<Vec<bool>> {
    if gallery.rows() == 0 || gallery_labels.is_empty() {
        return Err(Error::config("identification needs a non-empty gallery"));
    }
    if probes.rows() != probe_labels.len() || gallery.rows() != gallery_labels.len() {
        return Err(Error::Shape {
            op: "identification",
            lhs: vec![probes.rows(), gallery.rows()],
            rhs: vec![probe_labels.len(), gallery_labels.len()],
        });
    }
    let p = probes.l2_normalize_rows(NORM_EPS);
    let g = gallery.l2_normalize_rows(NORM_EPS);
    let sims = p.matmul_t(&g)?;
    Ok((0..p.rows())
        .map(|r| {
            let row = sims.row(r);
            let mut best = 0;
            for (j, &s) in row.iter().enumerate().skip(1) {
                if s > row[best] {
                    best = j;
                }
            }
            gallery_labels[best] == probe_labels[r]
        })
        .collect())
}

/// Fraction of probes whose nearest gallery entry has the same label.
pub fn identification_rank1(
    probes: &Tensor,
    gallery: &Tensor,
    probe_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<f64> {
    let hits = identification_hits(probes, gallery, probe_labels, gallery_labels)?;
    Ok(hit_rate(&hits))
}

fn hit_rate(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return f64::NAN;
    }
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// `1 − cos` between two rows.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - crate::numerics::cosine(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ver_acc: f64,
    pub threshold: f64,
    pub id_rank1: f64,
    /// Rank-1 over probes whose identity has fewer than ten instances.
    /// NaN when no such probe exists.
    pub tail_rank1: f64,
}

/// Runs `extractor` over the protocol inputs and scores both tasks.
pub fn evaluate_embeddings(
    embeddings: &Tensor,
    protocol: &EvalProtocol,
    counts: &[usize],
) -> Result<EvalReport> {
    let (d, g): (Vec<f64>, Vec<bool>) = protocol
        .pairs
        .iter()
        .map(|p| (cosine_distance(embeddings.row(p.a), embeddings.row(p.b)), p.genuine))
        .unzip();
    let ver = verification_accuracy(&d, &g)?;
    let probe_labels: Vec<usize> = protocol.probes.iter().map(|&i| protocol.label(i)).collect();
    let gallery_labels: Vec<usize> = protocol.gallery.iter().map(|&i| protocol.label(i)).collect();
    let hits = identification_hits(
        &embeddings.select_rows(&protocol.probes),
        &embeddings.select_rows(&protocol.gallery),
        &probe_labels,
        &gallery_labels,
    )?;
    let tail: Vec<bool> = hits
        .iter()
        .zip(&probe_labels)
        .filter(|(_, l)| counts.get(**l).is_some_and(|&c| c < TAIL_THRESHOLD))
        .map(|(&h, _)| h)
        .collect();
    Ok(EvalReport {
        ver_acc: ver.accuracy,
        threshold: ver.threshold,
        id_rank1: hit_rate(&hits),
        tail_rank1: hit_rate(&tail),
    })
}

pub fn evaluate_extractor(
    extractor: &MlpParams,
    inputs: &Tensor,
    protocol: &EvalProtocol,
    counts: &[usize],
) -> Result<EvalReport> {
    let emb = extractor.forward(inputs)?;
    evaluate_embeddings(&emb, protocol, counts)
}

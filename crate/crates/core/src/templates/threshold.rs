use crate::error::{Error, Result};

/// Plain (unbalanced) F1 from counts: `2tp / (2tp + fp + fn)`.
pub fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        (2 * tp) as f64 / den as f64
    }
}

/// Choose the threshold that maximizes F1 of the rule `score >= t`.
///
/// Candidates are the distinct observed scores: F1 is piecewise constant
/// between them, so this is exact. Ties in F1 go to the largest threshold.
/// Returns `(t, f1)`.
pub fn search_threshold(scores: &[(f64, bool)]) -> Result<(f64, f64)> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::DegenerateInput("NaN score"));
    }
    let positives = scores.iter().filter(|(_, y)| *y).count() as u64;
    if positives == 0 {
        return Err(Error::UndefinedF1);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].0.total_cmp(&scores[a].0));

    // F1 = 2tp / (tp + fp + P); compare fractions exactly by cross-multiplying.
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best: Option<(f64, u64, u64)> = None;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]].0;
        while i < order.len() && scores[order[i]].0 == t {
            if scores[order[i]].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (num, den) = (2 * tp, tp + fp + positives);
        let better = match best {
            None => true,
            Some((_, bn, bd)) => (num as u128) * (bd as u128) > (bn as u128) * (den as u128),
        };
        if better {
            best = Some((t, num, den));
        }
    }

    let (t, num, den) = best.expect("at least one candidate");
    Ok((t, num as f64 / den as f64))
}

use crate::error::{Result, SalientError};

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(SalientError::invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(SalientError::invalid("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(SalientError::invalid("metrics need at least one positive and one negative"));
    }
    Ok((pos, neg))
}

/// Step-wise average precision `sum (R_i - R_{i-1}) P_i` over descending
/// unique thresholds; tied scores form one threshold group.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let before = tp;
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // recall step from counts, so no error accumulates in R_i
        let dr = (tp - before) as f64 / pos as f64;
        ap += dr * (tp as f64 / (tp + fp) as f64);
    }
    Ok(ap)
}

/// Mann-Whitney statistic; ties count one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // count of (pos, neg) pairs with pos ranked above neg, via tie groups
    let (mut negs_below, mut wins) = (0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let (mut gp, mut gn) = (0usize, 0usize);
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        wins += gp as f64 * negs_below as f64 + 0.5 * (gp * gn) as f64;
        negs_below += gn;
    }
    Ok(wins / (pos * neg) as f64)
}

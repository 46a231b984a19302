use crate::error::{Error, Result};

fn check_pairs(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::arg(format!("length mismatch: {a} predictions, {b} labels")));
    }
    if a == 0 {
        return Err(Error::arg("empty input"));
    }
    Ok(())
}

/// Mean per-class recall over classes `0..n_classes`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    check_pairs(preds.len(), labels.len())?;
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= n_classes {
            return Err(Error::arg(format!("label {y} out of range")));
        }
        totals[y] += 1;
        hits[y] += usize::from(p == y);
    }
    if let Some(c) = totals.iter().position(|&t| t == 0) {
        return Err(Error::arg(format!("class {c} absent from labels")));
    }
    Ok(hits.iter().zip(&totals).map(|(&h, &t)| h as f64 / t as f64).sum::<f64>() / n_classes as f64)
}

/// Area under the ROC curve by the rank-sum statistic with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::arg("auroc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the positive rank sum keeps midranks integral
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank2_sum += mid2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Average precision: sum over distinct thresholds (descending) of
/// `delta recall * precision`, equal scores forming one threshold.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::arg("auc_pr needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut group_tp = 0;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                group_tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += group_tp;
        ap += group_tp as f64 / n_pos as f64 * (tp as f64 / (tp + fp) as f64);
        i = j;
    }
    Ok(ap)
}

/// Cohen's kappa; 0 when chance agreement is already perfect.
pub fn cohens_kappa(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    check_pairs(preds.len(), labels.len())?;
    let n = preds.len() as f64;
    let mut row = vec![0usize; n_classes];
    let mut col = vec![0usize; n_classes];
    let mut agree = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(Error::arg(format!("class index out of range for {n_classes} classes")));
        }
        row[y] += 1;
        col[p] += 1;
        agree += usize::from(p == y);
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = row.iter().zip(&col).map(|(&r, &c)| r as f64 * c as f64).sum::<f64>() / (n * n);
    if p_e == 1.0 {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

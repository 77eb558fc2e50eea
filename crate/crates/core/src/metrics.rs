//! Detection and calibration metrics. Positives are the samples a detector
//! should trust (higher score), negatives the ones it should reject.

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};

fn check_scores(name: &str, s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::invalid(format!("{name} scores are empty")));
    }
    if s.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid(format!("{name} scores contain NaN")));
    }
    Ok(())
}

fn sorted(s: &[f64]) -> Vec<f64> {
    let mut v = s.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mann-Whitney statistic: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores("positive", pos)?;
    check_scores("negative", neg)?;
    let neg = sorted(neg);
    // in half-credits so the sum stays integral
    let mut credit: u64 = 0;
    for &p in pos {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        credit += 2 * below as u64 + (not_above - below) as u64;
    }
    Ok((credit as f64 / 2.0) / (pos.len() as f64 * neg.len() as f64))
}

/// The `ceil(0.05 n)`-th smallest positive score.
pub fn tpr95_threshold(id_correct: &[f64]) -> Result<f64> {
    check_scores("ID-correct", id_correct)?;
    let s = sorted(id_correct);
    let k = s.len().div_ceil(20);
    Ok(s[k - 1])
}

/// Fraction of `scores` at or above `threshold`.
pub fn rate_at_or_above(scores: &[f64], threshold: f64) -> f64 {
    scores.iter().filter(|&&s| s >= threshold).count() as f64 / scores.len() as f64
}

/// `(fpr, threshold)` at the threshold keeping 95% of `id_correct`.
pub fn fpr_star(id_correct: &[f64], negatives: &[f64]) -> Result<(f64, f64)> {
    let tau = tpr95_threshold(id_correct)?;
    check_scores("negative", negatives)?;
    Ok((rate_at_or_above(negatives, tau), tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionMetrics {
    pub auc: f64,
    pub fpr_star: f64,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn detection_metrics(pos: &[f64], neg: &[f64]) -> Result<DetectionMetrics> {
    let (fpr, tau) = fpr_star(pos, neg)?;
    Ok(DetectionMetrics {
        auc: auc(pos, neg)?,
        fpr_star: fpr,
        threshold: tau,
        n_pos: pos.len(),
        n_neg: neg.len(),
    })
}

/// `{case: {auc, fpr_star, threshold, n_pos, n_neg}}`, keys in insertion order.
pub fn metrics_json(cases: &IndexMap<String, DetectionMetrics>) -> Result<String> {
    let mut s = serde_json::to_string_pretty(cases)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    /// `None` for an empty bin.
    pub mean_score: Option<f64>,
    pub accuracy: Option<f64>,
    pub count: usize,
}

/// `bins` equal-width bins over `[0, 1]`; each is `[lo, hi)` except the last,
/// which also holds 1.
pub fn reliability_bins(scores: &[f64], correct: &[bool], bins: usize) -> Result<Vec<ReliabilityBin>> {
    if bins == 0 {
        return Err(Error::invalid("at least one bin is required"));
    }
    if scores.len() != correct.len() {
        return Err(Error::shape("scores and correctness flags differ in length"));
    }
    let mut sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for (&s, &c) in scores.iter().zip(correct) {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::invalid(format!("score {s} outside [0, 1]")));
        }
        let b = ((s * bins as f64) as usize).min(bins - 1);
        sum[b] += s;
        hits[b] += usize::from(c);
        count[b] += 1;
    }
    Ok((0..bins)
        .map(|b| {
            let n = count[b];
            ReliabilityBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                mean_score: (n > 0).then(|| sum[b] / n as f64),
                accuracy: (n > 0).then(|| hits[b] as f64 / n as f64),
                count: n,
            }
        })
        .collect())
}

/// `bin_lo,bin_hi,mean_score,accuracy,count`; empty bins leave the means blank.
pub fn reliability_csv(bins: &[ReliabilityBin]) -> String {
    let mut out = String::from("bin_lo,bin_hi,mean_score,accuracy,count\n");
    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for b in bins {
        out.push_str(&format!("{},{},{},{},{}\n", b.lo, b.hi, o(b.mean_score), o(b.accuracy), b.count));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnifiedThreshold {
    pub threshold: f64,
    /// Per case the fraction at or above the threshold; `None` for empty cases.
    pub fpr: IndexMap<String, Option<f64>>,
    pub mean: Option<f64>,
    pub max: Option<f64>,
}

/// Applies the threshold fixed on `id_correct` to every case.
pub fn unified_threshold_eval(id_correct: &[f64], cases: &[(String, Vec<f64>)]) -> Result<UnifiedThreshold> {
    let tau = tpr95_threshold(id_correct)?;
    let mut fpr = IndexMap::new();
    let mut present = Vec::new();
    for (name, scores) in cases {
        let v = if scores.is_empty() {
            log::warn!("case `{name}` has no samples; excluded from the summary");
            None
        } else {
            check_scores(name, scores)?;
            Some(rate_at_or_above(scores, tau))
        };
        if let Some(x) = v {
            present.push(x);
        }
        fpr.insert(name.clone(), v);
    }
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    let max = present.iter().copied().reduce(f64::max);
    Ok(UnifiedThreshold {
        threshold: tau,
        fpr,
        mean,
        max,
    })
}

impl UnifiedThreshold {
    /// `case,fpr` rows followed by `mean` and `max`.
    pub fn to_csv(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("case,fpr\n");
        for (k, v) in &self.fpr {
            out.push_str(&format!("{k},{}\n", o(*v)));
        }
        out.push_str(&format!("mean,{}\nmax,{}\n", o(self.mean), o(self.max)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[1.0; 5], &[0.0; 3]).unwrap(), 1.0);
        let s = [0.1, 0.4, 0.4, 0.7];
        assert_eq!(auc(&s, &s).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert!(auc(&[], &[1.0]).is_err());
        assert!(auc(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn auc_swaps_to_complement() {
        let p = [0.3, 0.8, 0.8, 0.1, 0.55];
        let n = [0.8, 0.2, 0.55, 0.0];
        assert!((auc(&p, &n).unwrap() + auc(&n, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fpr_star_hand_example() {
        let id: Vec<f64> = (1..=20).map(|i| i as f64 / 100.0).collect();
        let (fpr, tau) = fpr_star(&id, &[0.005, 0.05, 0.15]).unwrap();
        assert_eq!(tau, 0.01);
        assert_eq!(fpr, 2.0 / 3.0);
        assert_eq!(fpr_star(&id, &[0.0, 0.001]).unwrap().0, 0.0);
    }

    #[test]
    fn fpr_star_same_multiset() {
        let id: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let (fpr, _) = fpr_star(&id, &id).unwrap();
        assert!((fpr - 0.95).abs() <= 1.0 / id.len() as f64 + 1e-12);
    }

    #[test]
    fn reliability_cases() {
        let all = reliability_bins(&[1.0; 4], &[true; 4], 5).unwrap();
        assert_eq!(all[4].count, 4);
        assert_eq!(all[4].mean_score, Some(1.0));
        assert!(all[..4].iter().all(|b| b.count == 0 && b.mean_score.is_none()));

        let single = reliability_bins(&[0.2, 0.6, 0.9], &[true, false, true], 1).unwrap();
        assert_eq!(single[0].count, 3);
        assert!((single[0].mean_score.unwrap() - (0.2 + 0.6 + 0.9) / 3.0).abs() < 1e-15);
        assert_eq!(single[0].accuracy, Some(2.0 / 3.0));

        let two = reliability_bins(&[0.1, 0.3, 0.5, 0.8], &[false, true, true, true], 2).unwrap();
        assert_eq!((two[0].count, two[1].count), (2, 2));
        assert_eq!(two[0].mean_score, Some(0.2));
        assert_eq!(two[0].accuracy, Some(0.5));
        assert_eq!(two[1].mean_score, Some(0.65));
        assert_eq!(two[1].accuracy, Some(1.0));
        assert!(reliability_bins(&[1.2], &[true], 2).is_err());

        let csv = reliability_csv(&two[..1]);
        assert_eq!(csv, "bin_lo,bin_hi,mean_score,accuracy,count\n0,0.5,0.2,0.5,2\n");
    }

    #[test]
    fn unified_threshold() {
        let id: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let cases = vec![
            ("low".to_string(), vec![0.0, 0.001]),
            ("same".to_string(), id.clone()),
            ("none".to_string(), vec![]),
        ];
        let t = unified_threshold_eval(&id, &cases).unwrap();
        assert_eq!(t.threshold, 0.05);
        assert_eq!(t.fpr["low"], Some(0.0));
        assert_eq!(t.fpr["same"], Some(0.96));
        assert_eq!(t.fpr["none"], None);
        assert_eq!(t.mean, Some(0.48));
        assert_eq!(t.max, Some(0.96));
    }
}

//! Agreement and ranking metrics: quadratic weighted kappa and ROC AUC.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::progression::SeverityGrade;
use crate::NUM_GRADES;

/// Counts with rows = true grade, columns = predicted grade.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    grades: usize,
}

impl ConfusionMatrix {
    pub fn new(y_true: &[usize], y_pred: &[usize], grades: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::contract(format!(
                "label vectors differ in length: {} vs {}",
                y_true.len(),
                y_pred.len()
            )));
        }
        let mut counts = vec![0u64; grades * grades];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t >= grades || p >= grades {
                return Err(Error::contract(format!("grade out of range: ({t}, {p})")));
            }
            counts[t * grades + p] += 1;
        }
        Ok(ConfusionMatrix { counts, grades })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.grades + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn grades(&self) -> usize {
        self.grades
    }
}

/// Quadratic weighted kappa on proportion matrices.
///
/// `κ = 1 − Σ w·O / Σ w·E` with `w_ij = (i−j)²/(G−1)²`. When expected
/// disagreement is zero (a single grade in both vectors) agreement is perfect
/// by construction and 1.0 is returned with a warning.
#[allow(clippy::needless_range_loop)]
pub fn quadratic_weighted_kappa(y_true: &[usize], y_pred: &[usize], grades: usize) -> Result<f64> {
    if y_true.len() < 2 {
        return Err(Error::contract("kappa needs at least two samples"));
    }
    if grades < 2 {
        return Err(Error::contract("kappa needs at least two grades"));
    }
    let cm = ConfusionMatrix::new(y_true, y_pred, grades)?;
    let n = cm.total() as f64;
    let mut row = vec![0.0; grades];
    let mut col = vec![0.0; grades];
    for i in 0..grades {
        for j in 0..grades {
            let o = cm.get(i, j) as f64 / n;
            row[i] += o;
            col[j] += o;
        }
    }
    let denom_w = ((grades - 1) * (grades - 1)) as f64;
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..grades {
        for j in 0..grades {
            let d = i as f64 - j as f64;
            let w = d * d / denom_w;
            observed += w * cm.get(i, j) as f64 / n;
            expected += w * row[i] * col[j];
        }
    }
    if expected == 0.0 {
        log::warn!("kappa: expected disagreement is zero, returning 1.0");
        return Ok(1.0);
    }
    Ok(1.0 - observed / expected)
}

/// Thresholded ROC points from the highest score down.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined(format!(
            "AUC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = RocCurve {
        thresholds: vec![f64::INFINITY],
        tpr: vec![0.0],
        fpr: vec![0.0],
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.thresholds.push(s);
        curve.tpr.push(tp as f64 / pos as f64);
        curve.fpr.push(fp as f64 / neg as f64);
    }
    Ok(curve)
}

/// Mann–Whitney AUC, `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, via mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties share the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// Argmax decode; ties resolve to the lower grade.
pub fn grade_from_logits(logits: &[f64]) -> Result<SeverityGrade> {
    if logits.len() != NUM_GRADES {
        return Err(Error::contract(format!(
            "expected {NUM_GRADES} logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logits {logits:?}")));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    SeverityGrade::new(best as u8)
}

/// Row-wise [`grade_from_logits`] over a `[n × 5]` matrix.
pub fn grades_from_logit_rows(logits: &Tensor) -> Result<Vec<SeverityGrade>> {
    let (m, _) = logits.dims2()?;
    (0..m).map(|i| grade_from_logits(logits.row_slice(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kappa_perfect_and_reversed() {
        let y = [0, 1, 2, 3, 4, 2, 1];
        assert!((quadratic_weighted_kappa(&y, &y, 5).unwrap() - 1.0).abs() < 1e-12);
        let k = quadratic_weighted_kappa(&[0, 1], &[1, 0], 5).unwrap();
        assert!((k + 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_degenerate_is_one() {
        assert_eq!(quadratic_weighted_kappa(&[2, 2, 2], &[2, 2, 2], 5).unwrap(), 1.0);
    }

    #[test]
    fn kappa_rejects_bad_input() {
        assert!(quadratic_weighted_kappa(&[1], &[1], 5).is_err());
        assert!(quadratic_weighted_kappa(&[1, 2], &[1], 5).is_err());
        assert!(quadratic_weighted_kappa(&[1, 7], &[1, 2], 5).is_err());
    }

    #[test]
    fn kappa_chance_level_on_shuffled_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..5)).collect();
        let mut p = y.clone();
        p.shuffle(&mut rng);
        let k = quadratic_weighted_kappa(&y, &p, 5).unwrap();
        assert!(k.abs() < 0.05, "{k}");
    }

    #[test]
    fn auc_basic_cases() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::Undefined(_))));
    }

    fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let scores: Vec<f64> = (0..20).map(|_| (rng.random_range(0..8) as f64) / 4.0).collect();
        let mut labels: Vec<bool> = (0..20).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = roc_auc(&scores, &labels).unwrap();
        assert!((a - brute_force_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn roc_curve_runs_corner_to_corner() {
        let c = roc_curve(&[0.2, 0.8, 0.5, 0.5], &[false, true, false, true]).unwrap();
        assert_eq!((c.tpr[0], c.fpr[0]), (0.0, 0.0));
        assert_eq!((*c.tpr.last().unwrap(), *c.fpr.last().unwrap()), (1.0, 1.0));
        assert!(c.tpr.windows(2).all(|w| w[1] >= w[0]));
        assert!(c.fpr.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn decode_rules() {
        assert_eq!(grade_from_logits(&[0.0, 0.0, 5.0, 0.0, 0.0]).unwrap().value(), 2);
        assert_eq!(grade_from_logits(&[1.0; 5]).unwrap().value(), 0);
        assert!(grade_from_logits(&[0.0, f64::NAN, 0.0, 0.0, 0.0]).is_err());
        let l = [0.3, -1.0, 2.5, 2.4, 0.0];
        let shifted: Vec<f64> = l.iter().map(|v| v + 7.5).collect();
        assert_eq!(grade_from_logits(&l).unwrap(), grade_from_logits(&shifted).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
            proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 4..40).prop_filter_map(
                "both classes",
                |v| {
                    let (s, l): (Vec<f64>, Vec<bool>) = v.into_iter().unzip();
                    (l.iter().any(|&x| x) && l.iter().any(|&x| !x)).then_some((s, l))
                },
            )
        }

        proptest! {
            #[test]
            fn auc_complement((s, l) in scored()) {
                let neg: Vec<f64> = s.iter().map(|v| -v).collect();
                let sum = roc_auc(&s, &l).unwrap() + roc_auc(&neg, &l).unwrap();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }

            #[test]
            fn auc_invariant_under_monotone_transform((s, l) in scored()) {
                let t: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
                prop_assert!((roc_auc(&s, &l).unwrap() - roc_auc(&t, &l).unwrap()).abs() < 1e-12);
            }

            #[test]
            fn kappa_invariant_under_sample_permutation(
                pairs in proptest::collection::vec((0usize..5, 0usize..5), 2..60),
                seed in any::<u64>(),
            ) {
                let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
                let mut idx: Vec<usize> = (0..t.len()).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let tp: Vec<usize> = idx.iter().map(|&i| t[i]).collect();
                let pp: Vec<usize> = idx.iter().map(|&i| p[i]).collect();
                let a = quadratic_weighted_kappa(&t, &p, 5).unwrap();
                let b = quadratic_weighted_kappa(&tp, &pp, 5).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

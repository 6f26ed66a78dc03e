//! Voting over sub-sequences and ROC analysis.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StamError};

/// A video is positive when any sub-sequence reaches `threshold`; its score
/// is the largest sub-sequence probability.
pub fn vote_predict(probabilities: &[f64], threshold: f64) -> Result<(u8, f64)> {
    let score = probabilities
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))))
        .ok_or(StamError::EmptyInput)?;
    Ok((u8::from(score >= threshold), score))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(StamError::ConfigInvalid(format!("label {bad} is not binary")));
    }
    if pos == 0 {
        return Err(StamError::SingleClass(0));
    }
    if neg == 0 {
        return Err(StamError::SingleClass(1));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the normalized Mann-Whitney statistic, ties
/// counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(StamError::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks of the positives, computed in doubled units to stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, doubled midrank = i + j + 2
        let mid2 = (i + j + 2) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += mid2 * tied_pos;
        i = j + 1;
    }
    let u2 = rank_sum2 - (pos as u128) * (pos as u128 + 1);
    Ok(u2 as f64 / (2.0 * pos as f64 * neg as f64))
}

/// ROC points from sweeping every distinct score as a threshold (predict
/// positive when `score >= threshold`), starting at `(0, 0)` with an infinite
/// threshold.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(StamError::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: thr,
        });
    }
    Ok(points)
}

pub fn trapezoid_auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub r#fn: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[u8], labels: &[u8]) -> Self {
        let mut c = Self::default();
        for (&p, &y) in predicted.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.r#fn += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.tn + self.r#fn;
        if n == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub id: String,
    pub label: u8,
    pub score: f64,
    pub predicted: u8,
    pub subsequences: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub roc_auc: f64,
    pub roc_points: Vec<RocPoint>,
    pub per_video: Vec<VideoScore>,
    pub threshold: f64,
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn from_scores(per_video: Vec<VideoScore>, threshold: f64) -> Result<Self> {
        let scores: Vec<f64> = per_video.iter().map(|v| v.score).collect();
        let labels: Vec<u8> = per_video.iter().map(|v| v.label).collect();
        let predicted: Vec<u8> = per_video.iter().map(|v| v.predicted).collect();
        Ok(Self {
            roc_auc: roc_auc(&scores, &labels)?,
            roc_points: roc_points(&scores, &labels)?,
            confusion: Confusion::from_predictions(&predicted, &labels),
            per_video,
            threshold,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn hand_case() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let y = [0, 0, 1, 1];
        assert_eq!(roc_auc(&s, &y).unwrap(), 0.75);
        assert_eq!(brute_force(&s, &y), 0.75);
        let pts = roc_points(&s, &y).unwrap();
        assert!((trapezoid_auc(&pts) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn separated_and_tied() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        let pts = roc_points(&[0.5; 4], &[0, 1, 0, 1]).unwrap();
        assert_eq!(pts.len(), 2);
        assert!((trapezoid_auc(&pts) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(StamError::SingleClass(1))));
        assert!(matches!(roc_auc(&[0.1, 0.2], &[0, 0]), Err(StamError::SingleClass(0))));
        assert!(roc_auc(&[0.1], &[0, 1]).is_err());
    }

    #[test]
    fn voting() {
        assert_eq!(vote_predict(&[0.2, 0.7], 0.5).unwrap(), (1, 0.7));
        assert_eq!(vote_predict(&[0.1, 0.2, 0.3], 0.5).unwrap(), (0, 0.3));
        assert_eq!(vote_predict(&[0.9], 0.5).unwrap(), (1, 0.9));
        assert_eq!(vote_predict(&[0.5], 0.5).unwrap(), (1, 0.5));
        assert!(matches!(vote_predict(&[], 0.5), Err(StamError::EmptyInput)));
    }

    #[test]
    fn confusion_counts() {
        let c = Confusion::from_predictions(&[1, 1, 0, 0], &[1, 0, 1, 0]);
        assert_eq!((c.tp, c.fp, c.r#fn, c.tn), (1, 1, 1, 1));
        assert_eq!(c.accuracy(), 0.5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
            (2usize..=50).prop_flat_map(|n| {
                (
                    prop::collection::vec((0u8..8).prop_map(|v| v as f64 / 8.0), n),
                    prop::collection::vec(0u8..=1, n),
                )
                    .prop_filter("both classes", |(_, y)| y.contains(&0) && y.contains(&1))
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn matches_pairwise_oracle((s, y) in instance()) {
                let auc = roc_auc(&s, &y).unwrap();
                prop_assert_eq!(auc, brute_force(&s, &y));
                let pts = roc_points(&s, &y).unwrap();
                prop_assert!((trapezoid_auc(&pts) - auc).abs() <= 1e-9);
                prop_assert!(pts.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
            }

            #[test]
            fn invariant_under_monotone_transform((s, y) in instance()) {
                let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
                prop_assert_eq!(roc_auc(&s, &y).unwrap(), roc_auc(&t, &y).unwrap());
            }

            #[test]
            fn vote_monotone_in_threshold(
                p in prop::collection::vec(0.0f64..1.0, 1..10),
                a in 0.0f64..1.0,
                b in 0.0f64..1.0,
            ) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let (at_hi, _) = vote_predict(&p, hi).unwrap();
                let (at_lo, _) = vote_predict(&p, lo).unwrap();
                prop_assert!(at_hi <= at_lo);
            }
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Point;

/// Outcome of matching predictions to ground truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(pred_idx, gt_idx, distance)`.
    pub matches: Vec<(usize, usize, f64)>,
}

impl MatchReport {
    /// Adds the counts of another report; matches are not merged.
    pub fn accumulate(&mut self, other: &MatchReport) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Greedy one-to-one matching: all pairs within `radius`, taken in order of
/// ascending distance with ties broken by `(pred_idx, gt_idx)`.
pub fn match_detections(pred: &[Point], gt: &[Point], radius: f64) -> Result<MatchReport> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument {
            arg: "radius",
            reason: format!("must be positive, got {radius}"),
        });
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let d = p.distance(g);
            if d <= radius {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut matches = Vec::new();
    for (d, i, j) in pairs {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            matches.push((i, j, d));
        }
    }
    let tp = matches.len();
    Ok(MatchReport {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
        matches,
    })
}

/// Precision, recall and F1; every zero denominator yields 0.
pub fn prf1(report: &MatchReport) -> Metrics {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(report.tp, report.tp + report.fp);
    let recall = ratio(report.tp, report.tp + report.fn_);
    Metrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        tp: report.tp,
        fp: report.fp,
        fn_: report.fn_,
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossing_configuration() {
        // p1-g2 1, p1-g1 2, p2-g2 3, p2-g1 beyond the radius
        let g1 = Point::new(0.0, 0.0);
        let g2 = Point::new(3.0, 0.0);
        let p1 = Point::new(2.0, 0.0);
        let p2 = Point::new(3.0, 3.0);
        assert_eq!(p1.distance(&g2), 1.0);
        assert_eq!(p1.distance(&g1), 2.0);
        assert_eq!(p2.distance(&g2), 3.0);
        assert!(p2.distance(&g1) > 4.0);
        let r = match_detections(&[p1, p2], &[g1, g2], 4.0).unwrap();
        // p1 takes g2 first; p2 is left with nothing within radius except g2
        assert_eq!(r.matches.iter().map(|m| (m.0, m.1)).collect::<Vec<_>>(), vec![(0, 1)]);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 1));
    }

    #[test]
    fn identical_and_empty() {
        let gt = [Point::new(1.0, 1.0), Point::new(50.0, 9.0)];
        let r = match_detections(&gt, &gt, 30.0).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (2, 0, 0));
        let r = match_detections(&[], &gt, 30.0).unwrap();
        assert_eq!(r.fn_, 2);
        assert!(match_detections(&[], &gt, 0.0).is_err());
    }

    #[test]
    fn zero_convention() {
        let m = prf1(&MatchReport::default());
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }
}

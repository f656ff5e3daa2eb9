//! Reducing a set of hypotheses to one pose, and the variance-based
//! confidence score.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{joint_errors, mpjpe};
use crate::pose::Pose3D;
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "A")]
    Average,
    #[serde(rename = "M")]
    Median,
    #[serde(rename = "R")]
    Random,
    /// Hypothesis closest to ground truth.
    #[serde(rename = "B")]
    Best,
    /// Closest joint to ground truth, chosen per joint.
    #[serde(rename = "Bjoint")]
    BestJoint,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Average,
        Strategy::Median,
        Strategy::Random,
        Strategy::Best,
        Strategy::BestJoint,
    ];

    pub fn needs_ground_truth(self) -> bool {
        matches!(self, Strategy::Best | Strategy::BestJoint)
    }

    pub fn code(self) -> &'static str {
        match self {
            Strategy::Average => "A",
            Strategy::Median => "M",
            Strategy::Random => "R",
            Strategy::Best => "B",
            Strategy::BestJoint => "Bjoint",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "average" => Ok(Strategy::Average),
            "M" | "median" => Ok(Strategy::Median),
            "R" | "random" => Ok(Strategy::Random),
            "B" | "best" => Ok(Strategy::Best),
            "Bjoint" | "B-joint" | "best_joint" => Ok(Strategy::BestJoint),
            other => Err(Error::Config(format!(
                "unknown aggregation strategy `{other}` (expected A, M, R, B or Bjoint)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationResult {
    pub pose: Pose3D,
    pub strategy: Strategy,
    /// Present when the strategy picks one whole hypothesis.
    pub chosen_index: Option<usize>,
    /// Variance score; absent for a single hypothesis.
    pub confidence: Option<f64>,
}

fn check(hs: &[Pose3D]) -> Result<usize> {
    let first = hs
        .first()
        .ok_or_else(|| Error::Validation("empty hypothesis set".into()))?;
    let j = first.joint_count();
    if hs.iter().any(|h| h.joint_count() != j) {
        return Err(Error::Shape("hypotheses have different joint counts".into()));
    }
    Ok(j)
}

/// Per-coordinate mean.
pub fn aggregate_average(hs: &[Pose3D]) -> Result<Pose3D> {
    let j = check(hs)?;
    let n = hs.len() as f64;
    let coords = (0..j)
        .map(|jj| {
            let mut c = [0.0; 3];
            for h in hs {
                for k in 0..3 {
                    c[k] += h.coords[jj][k];
                }
            }
            c.map(|v| v / n)
        })
        .collect();
    Ok(Pose3D::new(coords))
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-coordinate median; the midpoint of the two central values for even H.
pub fn aggregate_median(hs: &[Pose3D]) -> Result<Pose3D> {
    let j = check(hs)?;
    let mut buf = vec![0.0; hs.len()];
    let coords = (0..j)
        .map(|jj| {
            let mut c = [0.0; 3];
            for (k, ck) in c.iter_mut().enumerate() {
                for (b, h) in buf.iter_mut().zip(hs) {
                    *b = h.coords[jj][k];
                }
                *ck = median_of(&mut buf);
            }
            c
        })
        .collect();
    Ok(Pose3D::new(coords))
}

/// Uniformly random hypothesis; the index depends only on `seed` and H.
pub fn select_random(hs: &[Pose3D], seed: u64) -> Result<AggregationResult> {
    check(hs)?;
    let idx = rng_from(seed).random_range(0..hs.len());
    Ok(AggregationResult {
        pose: hs[idx].clone(),
        strategy: Strategy::Random,
        chosen_index: Some(idx),
        confidence: confidence(hs),
    })
}

/// Hypothesis with the lowest MPJPE against `gt` (first on ties).
pub fn select_best(hs: &[Pose3D], gt: &Pose3D) -> Result<AggregationResult> {
    check(hs)?;
    let mut best = (0, f64::INFINITY);
    for (i, h) in hs.iter().enumerate() {
        let e = mpjpe(h, gt)?;
        if e < best.1 {
            best = (i, e);
        }
    }
    Ok(AggregationResult {
        pose: hs[best.0].clone(),
        strategy: Strategy::Best,
        chosen_index: Some(best.0),
        confidence: confidence(hs),
    })
}

/// For each joint, the position from the hypothesis closest to `gt` there.
pub fn select_best_jointwise(hs: &[Pose3D], gt: &Pose3D) -> Result<Pose3D> {
    let j = check(hs)?;
    let errors = hs
        .iter()
        .map(|h| joint_errors(h, gt))
        .collect::<Result<Vec<_>>>()?;
    let coords = (0..j)
        .map(|jj| {
            let mut best = 0;
            for i in 1..hs.len() {
                if errors[i][jj] < errors[best][jj] {
                    best = i;
                }
            }
            hs[best].coords[jj]
        })
        .collect();
    Ok(Pose3D::new(coords))
}

/// Mean over the `3 J` coordinates of the unbiased variance across
/// hypotheses. `None` when fewer than two hypotheses exist.
pub fn confidence(hs: &[Pose3D]) -> Option<f64> {
    if hs.len() < 2 {
        return None;
    }
    let j = hs[0].joint_count();
    if j == 0 || hs.iter().any(|h| h.joint_count() != j) {
        return None;
    }
    let n = hs.len() as f64;
    let mut total = 0.0;
    for jj in 0..j {
        for k in 0..3 {
            let mean = hs.iter().map(|h| h.coords[jj][k]).sum::<f64>() / n;
            total += hs.iter().map(|h| (h.coords[jj][k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        }
    }
    Some(total / (3 * j) as f64)
}

/// Applies `strategy`; `gt` is required for the oracle strategies and
/// `seed` is used by random selection only.
pub fn aggregate(
    hs: &[Pose3D],
    strategy: Strategy,
    gt: Option<&Pose3D>,
    seed: u64,
) -> Result<AggregationResult> {
    let need_gt = || {
        gt.ok_or_else(|| {
            Error::Validation(format!("strategy {strategy} needs ground truth"))
        })
    };
    let simple = |pose| AggregationResult {
        pose,
        strategy,
        chosen_index: None,
        confidence: confidence(hs),
    };
    match strategy {
        Strategy::Average => Ok(simple(aggregate_average(hs)?)),
        Strategy::Median => Ok(simple(aggregate_median(hs)?)),
        Strategy::Random => select_random(hs, seed),
        Strategy::Best => select_best(hs, need_gt()?),
        Strategy::BestJoint => Ok(simple(select_best_jointwise(hs, need_gt()?)?)),
    }
}

/// Per-frame inputs to [`confidence_filter`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredFrame {
    pub confidence: f64,
    pub mpjpe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub recall: f64,
    /// Indices of kept frames, most confident first.
    pub kept: Vec<usize>,
    pub total_frames: usize,
    pub mpjpe_all: f64,
    pub mpjpe_kept: f64,
}

/// Keeps the `ceil(recall * N)` frames with the lowest variance score.
pub fn confidence_filter(frames: &[ScoredFrame], recall: f64) -> Result<FilterOutcome> {
    if frames.is_empty() {
        return Err(Error::Validation("no frames to filter".into()));
    }
    if !(recall > 0.0 && recall <= 1.0) {
        return Err(Error::Validation(format!("recall must lie in (0, 1], got {recall}")));
    }
    let n = frames.len();
    // Guard against products like 0.9 * 10 = 9.000000000000002.
    let keep = ((recall * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        frames[a]
            .confidence
            .total_cmp(&frames[b].confidence)
            .then(a.cmp(&b))
    });
    order.truncate(keep);
    let mean = |idx: &mut dyn Iterator<Item = usize>, count: usize| {
        idx.map(|i| frames[i].mpjpe).sum::<f64>() / count as f64
    };
    Ok(FilterOutcome {
        recall,
        mpjpe_all: mean(&mut (0..n), n),
        mpjpe_kept: mean(&mut order.iter().copied(), keep),
        kept: order,
        total_frames: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(values: &[f64]) -> Vec<Pose3D> {
        values.iter().map(|&v| Pose3D::new(vec![[v, 0.0, 0.0]])).collect()
    }

    #[test]
    fn average_and_median_examples() {
        assert_eq!(aggregate_average(&scalar(&[1.0, 2.0, 3.0])).unwrap().coords[0][0], 2.0);
        assert_eq!(aggregate_median(&scalar(&[1.0, 100.0, 2.0])).unwrap().coords[0][0], 2.0);
        assert_eq!(aggregate_median(&scalar(&[4.0, 1.0, 3.0, 2.0])).unwrap().coords[0][0], 2.5);
        let same = scalar(&[7.0, 7.0]);
        assert_eq!(aggregate_average(&same).unwrap(), same[0]);
    }

    #[test]
    fn best_picks_lowest_error() {
        let gt = Pose3D::new(vec![[0.0; 3]]);
        let hs = scalar(&[10.0, -5.0, 20.0]);
        let r = select_best(&hs, &gt).unwrap();
        assert_eq!(r.chosen_index, Some(1));
        assert_eq!(r.strategy, Strategy::Best);
    }

    #[test]
    fn singletons() {
        let hs = scalar(&[3.0]);
        let gt = Pose3D::new(vec![[0.0; 3]]);
        assert_eq!(select_random(&hs, 9).unwrap().chosen_index, Some(0));
        assert_eq!(select_best(&hs, &gt).unwrap().chosen_index, Some(0));
        assert_eq!(select_best_jointwise(&hs, &gt).unwrap(), hs[0]);
        assert_eq!(confidence(&hs), None);
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(&scalar(&[5.0, 5.0, 5.0])), Some(0.0));
        // Variance 2 in x, zero in y and z.
        assert_eq!(confidence(&scalar(&[0.0, 2.0])), Some(2.0 / 3.0));
    }

    #[test]
    fn filter_examples() {
        let frames = [
            ScoredFrame { confidence: 0.0, mpjpe: 10.0 },
            ScoredFrame { confidence: 1e6, mpjpe: 500.0 },
        ];
        let half = confidence_filter(&frames, 0.5).unwrap();
        assert_eq!(half.kept, vec![0]);
        assert_eq!(half.mpjpe_kept, 10.0);
        let all = confidence_filter(&frames, 1.0).unwrap();
        assert_eq!(all.mpjpe_kept, all.mpjpe_all);
        assert!(confidence_filter(&[], 0.5).is_err());
        assert!(confidence_filter(&frames, 0.0).is_err());
    }

    #[test]
    fn recall_rounding_guard() {
        let frames: Vec<ScoredFrame> = (0..10)
            .map(|i| ScoredFrame { confidence: i as f64, mpjpe: 1.0 })
            .collect();
        assert_eq!(confidence_filter(&frames, 0.9).unwrap().kept.len(), 9);
        assert_eq!(confidence_filter(&frames, 0.91).unwrap().kept.len(), 10);
        assert_eq!(confidence_filter(&frames, 0.01).unwrap().kept.len(), 1);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.code().parse::<Strategy>().unwrap(), s);
        }
        assert!("X".parse::<Strategy>().is_err());
        assert!(aggregate(&scalar(&[1.0]), Strategy::Best, None, 0)
            .unwrap_err()
            .is_validation());
    }
}

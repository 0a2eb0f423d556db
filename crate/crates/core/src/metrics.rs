//! Mask IoU, mean IoU, accuracy at IoU thresholds, per-point label sets, and
//! the run-length prediction file.
//!
//! Prediction file, one sample per line, whitespace separated:
//! ```text
//! <sample_id> <N> <run_0> <run_1> ...
//! ```
//! Runs alternate between unset and set points and always start with the
//! unset run, which may be 0. Runs sum to N and every run after the first is
//! positive. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};

/// Thresholds reported by default.
pub const ACC_THRESHOLDS: [f64; 2] = [0.25, 0.5];

/// `|pred ∧ gt| / |pred ∨ gt|`; two empty masks match perfectly.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            op: "iou",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean of per-sample IoUs; 0 for no samples.
pub fn miou(ious: &[f64]) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

/// Fraction of samples with IoU strictly above `k`; 0 for no samples.
pub fn acc_at_k(ious: &[f64], k: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v > k).count() as f64 / ious.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_sample_iou: Vec<f64>,
    pub miou: f64,
    /// Threshold (as written, e.g. `"0.25"`) → fraction above it.
    pub acc_at: BTreeMap<String, f64>,
}

impl EvalResult {
    pub fn from_ious(per_sample_iou: Vec<f64>) -> Self {
        let acc_at = ACC_THRESHOLDS
            .iter()
            .map(|&k| (k.to_string(), acc_at_k(&per_sample_iou, k)))
            .collect();
        Self {
            miou: miou(&per_sample_iou),
            acc_at,
            per_sample_iou,
        }
    }

    /// Scores predicted masks against ground truth, pairwise.
    pub fn score<'a>(pairs: impl IntoIterator<Item = (&'a [bool], &'a [bool])>) -> Result<Self> {
        let ious = pairs
            .into_iter()
            .map(|(p, g)| iou(p, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ious(ious))
    }

    pub fn acc(&self, k: f64) -> f64 {
        self.acc_at
            .get(&k.to_string())
            .copied()
            .unwrap_or_else(|| acc_at_k(&self.per_sample_iou, k))
    }
}

/// Per-point semantic class and object instance ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub semantic: Vec<u32>,
    pub instance: Vec<u32>,
}

impl LabelSet {
    pub fn new(semantic: Vec<u32>, instance: Vec<u32>) -> Result<Self> {
        if semantic.len() != instance.len() {
            return Err(Error::Dimension {
                op: "label_set",
                lhs: vec![semantic.len()],
                rhs: vec![instance.len()],
            });
        }
        Ok(Self { semantic, instance })
    }

    pub fn len(&self) -> usize {
        self.instance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance.is_empty()
    }
}

/// Indicator of the points belonging to `target`.
pub fn instance_to_binary(labels: &LabelSet, target: u32) -> Result<Vec<bool>> {
    let mask: Vec<bool> = labels.instance.iter().map(|&i| i == target).collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::Label(format!("instance {target} has no points")));
    }
    Ok(mask)
}

/// Run lengths of `mask`, starting with the unset run.
pub fn rle_encode(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    if len > 0 || runs.is_empty() {
        runs.push(len);
    }
    runs
}

pub fn rle_decode(runs: &[usize], n: usize) -> Result<Vec<bool>> {
    if runs.iter().skip(1).any(|&r| r == 0) {
        return Err(format_err("only the first run may be empty"));
    }
    let total: usize = runs.iter().sum();
    if total != n {
        return Err(format_err(format!("runs cover {total} points, expected {n}")));
    }
    let mut mask = Vec::with_capacity(n);
    for (i, &r) in runs.iter().enumerate() {
        mask.extend(std::iter::repeat_n(i % 2 == 1, r));
    }
    Ok(mask)
}

/// One predicted mask for a sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub mask: Vec<bool>,
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "# sample_id N runs (unset first)")?;
    for r in records {
        if r.sample_id.is_empty() || r.sample_id.contains(char::is_whitespace) {
            return Err(format_err(format!("sample id {:?} is not a single token", r.sample_id)));
        }
        write!(out, "{} {}", r.sample_id, r.mask.len())?;
        for run in rle_encode(&r.mask) {
            write!(out, " {run}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = crate::error::read_text(path)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| format_err(format!("prediction line {}: {what}", lineno + 1));
        let mut fields = line.split_whitespace();
        let sample_id = fields.next().ok_or_else(|| bad("missing id"))?.to_string();
        let n: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad("bad point count"))?;
        let runs: Vec<usize> = fields
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad run length"))?;
        let mask = rle_decode(&runs, n).map_err(|e| bad(&e.to_string()))?;
        records.push(PredictionRecord { sample_id, mask });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn iou_basics() {
        let a = [true, true, false, false];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(iou(&[true, false, false, false], &a).unwrap(), 0.5);
        assert_eq!(iou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(iou(&[true, false], &[false, false]).unwrap(), 0.0);
        assert!(matches!(iou(&a, &[true]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn accuracy_examples() {
        let ious = [0.3, 0.6, 0.1];
        assert_eq!(acc_at_k(&ious, 0.25), 2.0 / 3.0);
        assert_eq!(acc_at_k(&ious, 0.5), 1.0 / 3.0);
        assert_eq!(acc_at_k(&[1.0; 4], 0.25), 1.0);
        assert_eq!(acc_at_k(&[1.0; 4], 0.5), 1.0);
        // Strictly above.
        assert_eq!(acc_at_k(&[0.5, 0.25], 0.5), 0.0);
    }

    #[test]
    fn eval_result_aggregates() {
        let r = EvalResult::from_ious(vec![0.3, 0.6, 0.1]);
        assert!((r.miou - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.acc(0.25), 2.0 / 3.0);
        assert_eq!(r.acc(0.5), 1.0 / 3.0);
        assert_eq!(r.acc(0.05), 1.0);
        assert!(r.acc_at.contains_key("0.25") && r.acc_at.contains_key("0.5"));
    }

    #[test]
    fn binary_from_instances() {
        let labels = LabelSet::new(vec![0, 1, 1, 2, 0], vec![0, 1, 1, 2, 0]).unwrap();
        assert_eq!(instance_to_binary(&labels, 1).unwrap(), vec![false, true, true, false, false]);
        assert!(matches!(instance_to_binary(&labels, 7), Err(Error::Label(_))));
        let single = LabelSet::new(vec![3; 4], vec![5; 4]).unwrap();
        assert_eq!(instance_to_binary(&single, 5).unwrap(), vec![true; 4]);
        assert!(LabelSet::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn binary_popcount_matches_recount() {
        let mut r = rng(4);
        let instance: Vec<u32> = (0..500).map(|_| r.random_range(0..6)).collect();
        let labels = LabelSet::new(vec![0; 500], instance.clone()).unwrap();
        for t in 0..6 {
            let m = instance_to_binary(&labels, t).unwrap();
            let expect = instance.iter().filter(|&&i| i == t).count();
            assert_eq!(m.iter().filter(|&&b| b).count(), expect);
        }
    }

    #[test]
    fn rle_examples() {
        assert_eq!(rle_encode(&[true, true, false]), vec![0, 2, 1]);
        assert_eq!(rle_encode(&[false, false, true]), vec![2, 1]);
        assert_eq!(rle_encode(&[]), vec![0]);
        assert_eq!(rle_decode(&[0, 2, 1], 3).unwrap(), vec![true, true, false]);
        assert!(rle_decode(&[1, 0, 2], 3).is_err());
        assert!(rle_decode(&[1, 1], 3).is_err());
    }

    #[test]
    fn prediction_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.txt");
        let records = vec![
            PredictionRecord {
                sample_id: "s0001-q0".into(),
                mask: vec![false, true, true, false, true],
            },
            PredictionRecord {
                sample_id: "s0002-q0".into(),
                mask: vec![true; 3],
            },
        ];
        write_predictions(&records, &path).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), records);
        let bad = [PredictionRecord {
            sample_id: "has space".into(),
            mask: vec![true],
        }];
        assert!(write_predictions(&bad, &path).is_err());
    }

    proptest! {
        #[test]
        fn rle_round_trips(mask in proptest::collection::vec(any::<bool>(), 0..200)) {
            let runs = rle_encode(&mask);
            prop_assert_eq!(rle_decode(&runs, mask.len()).unwrap(), mask);
        }

        #[test]
        fn iou_symmetric_and_reflexive(
            a in proptest::collection::vec(any::<bool>(), 1..100),
            seed in any::<u64>(),
        ) {
            let mut r = rng(seed);
            let b: Vec<bool> = a.iter().map(|_| r.random_bool(0.5)).collect();
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            let v = iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            if a.iter().any(|&x| x) {
                prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn accuracy_monotone_and_miou_order_free(
            mut ious in proptest::collection::vec(0.0f64..=1.0, 1..60),
            k1 in 0.0f64..1.0,
            k2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            prop_assert!(acc_at_k(&ious, lo) >= acc_at_k(&ious, hi));
            let before = miou(&ious);
            ious.reverse();
            prop_assert!((miou(&ious) - before).abs() < 1e-12);
        }
    }
}

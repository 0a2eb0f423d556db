//! Training objectives: per-point BCE on the final mask, an area penalty on
//! the predicted probabilities, and a point-to-point contrastive term on the
//! fused features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which contrastive expression to optimize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum P2pForm {
    /// `-mean(ratio)`.
    AsWritten,
    /// `-mean(log ratio)`, the usual InfoNCE.
    #[default]
    LogForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_seg: f64,
    pub lambda_area: f64,
    pub lambda_p2p: f64,
    pub tau: f64,
    pub p2p_form: P2pForm,
    pub max_negatives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_seg: 1.0,
            lambda_area: 1.0,
            lambda_p2p: 0.05,
            tau: 0.1,
            p2p_form: P2pForm::LogForm,
            max_negatives: 4096,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_seg, self.lambda_area, self.lambda_p2p];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Contract(format!("loss weights must be finite and non-negative: {weights:?}")));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Contract(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Scalar values of each term and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub seg: f64,
    pub area: f64,
    pub p2p: f64,
    pub total: f64,
    /// The contrastive term had no positives or no negatives.
    pub p2p_skipped: bool,
}

fn label_tensor(tape: &Tape, logits: Var, labels: &[bool], op: &'static str) -> Result<Tensor> {
    let shape = tape.shape(logits).to_vec();
    if tape.value(logits).numel() != labels.len() {
        return Err(Error::Dimension {
            op,
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let data = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    Tensor::new(&shape, data)
}

/// Mean binary cross-entropy in logit form: `softplus(x) - x·y`.
pub fn seg_loss(tape: &mut Tape, logits: Var, labels: &[bool]) -> Result<Var> {
    let y = label_tensor(tape, logits, labels, "seg_loss")?;
    let y = tape.constant(y);
    let sp = tape.softplus(logits);
    let xy = tape.mul(logits, y)?;
    let per_point = tape.sub(sp, xy)?;
    Ok(tape.mean(per_point))
}

/// Mean predicted foreground probability.
pub fn area_loss(tape: &mut Tape, logits: Var) -> Var {
    let p = tape.sigmoid(logits);
    tape.mean(p)
}

/// Contrastive loss over already-selected positive rows `[P×C]` and
/// negative rows `[Q×C]`. With no negatives every ratio is 1.
pub fn contrastive(tape: &mut Tape, positives: Var, negatives: Option<Var>, tau: f64, form: P2pForm) -> Result<Var> {
    let pos = tape.normalize_rows(positives)?;
    let avg = tape.mean_rows(pos)?;
    let avg_t = tape.transpose(avg)?;
    let mut logits = tape.matmul(pos, avg_t)?;
    if let Some(neg) = negatives {
        let neg = tape.normalize_rows(neg)?;
        let neg_t = tape.transpose(neg)?;
        let neg_logits = tape.matmul(pos, neg_t)?;
        logits = tape.concat_cols(&[logits, neg_logits])?;
    }
    let logits = tape.scale(logits, 1.0 / tau);
    let picked = match form {
        P2pForm::LogForm => tape.log_softmax(logits, 1)?,
        P2pForm::AsWritten => tape.softmax(logits, 1)?,
    };
    let first = tape.slice_cols(picked, 0, 1)?;
    let mean = tape.mean(first);
    Ok(tape.scale(mean, -1.0))
}

/// Contrastive term on per-point features `[N×C]`. Negatives beyond
/// `max_negatives` are subsampled uniformly with `rng`. Returns `None`, with
/// a logged warning, when the labels have no positive or no negative point.
pub fn p2p_loss(
    tape: &mut Tape,
    features: Var,
    labels: &[bool],
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<Option<Var>> {
    if tape.value(features).rows() != labels.len() {
        return Err(Error::Dimension {
            op: "p2p_loss",
            lhs: tape.shape(features).to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        log::warn!(
            "contrastive loss skipped: {} positive and {} negative points",
            pos.len(),
            neg.len()
        );
        return Ok(None);
    }
    if neg.len() > cfg.max_negatives {
        let mut pick = rand::seq::index::sample(rng, neg.len(), cfg.max_negatives).into_vec();
        pick.sort_unstable();
        neg = pick.into_iter().map(|i| neg[i]).collect();
    }
    let negatives = if neg.is_empty() {
        None
    } else {
        Some(tape.gather_rows(features, neg)?)
    };
    let positives = tape.gather_rows(features, pos)?;
    contrastive(tape, positives, negatives, cfg.tau, cfg.p2p_form).map(Some)
}

/// Weighted sum of the terms. A skipped contrastive term contributes zero.
/// Any non-finite term is a training error.
pub fn total_loss(tape: &mut Tape, seg: Var, area: Var, p2p: Option<Var>, cfg: &LossConfig) -> Result<(Var, LossReport)> {
    let mut report = LossReport {
        seg: tape.value(seg).item(),
        area: tape.value(area).item(),
        p2p: p2p.map_or(0.0, |v| tape.value(v).item()),
        total: 0.0,
        p2p_skipped: p2p.is_none(),
    };
    for (name, v) in [("seg", report.seg), ("area", report.area), ("p2p", report.p2p)] {
        if !v.is_finite() {
            return Err(Error::Training(format!("{name} loss is {v}")));
        }
    }
    let a = tape.scale(seg, cfg.lambda_seg);
    let b = tape.scale(area, cfg.lambda_area);
    let mut total = tape.add(a, b)?;
    if let Some(p) = p2p {
        let c = tape.scale(p, cfg.lambda_p2p);
        total = tape.add(total, c)?;
    }
    report.total = tape.value(total).item();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{grad_check, rng, uniform};
    use proptest::prelude::*;

    fn row(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::new(&[1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn zero_logits_give_ln2() {
        let mut tape = Tape::new();
        let x = row(&mut tape, &[0.0; 5]);
        let l = seg_loss(&mut tape, x, &[true, false, true, true, false]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_are_cheap() {
        let mut tape = Tape::new();
        let x = row(&mut tape, &[10.0, -10.0, 10.0]);
        let l = seg_loss(&mut tape, x, &[true, false, true]).unwrap();
        let v = tape.value(l).item();
        assert!(v < 1e-3);
        assert!((v - (1.0 + (-10f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn seg_length_mismatch() {
        let mut tape = Tape::new();
        let x = row(&mut tape, &[0.0; 3]);
        assert!(matches!(seg_loss(&mut tape, x, &[true]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn seg_gradient_matches_finite_differences() {
        let labels = [true, false, false, true, true, false, true];
        for seed in 0..5 {
            let x = uniform(&mut rng(seed), &[1, 7], -4.0, 4.0);
            let err = grad_check(&[x], 1e-5, |t, v| seg_loss(t, v[0], &labels));
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn area_values() {
        let mut tape = Tape::new();
        let x = row(&mut tape, &[0.0; 4]);
        let a = area_loss(&mut tape, x);
        assert_eq!(tape.value(a).item(), 0.5);

        let xs = uniform(&mut rng(1), &[1, 30], -6.0, 6.0);
        let oracle = xs.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).sum::<f64>() / 30.0;
        let x = tape.constant(xs);
        let a = area_loss(&mut tape, x);
        assert!((tape.value(a).item() - oracle).abs() < 1e-12);

        let mut last = f64::INFINITY;
        for shift in [0.0, -2.0, -10.0, -40.0, -800.0] {
            let x = row(&mut tape, &[shift, shift + 1.0]);
            let a = area_loss(&mut tape, x);
            let v = tape.value(a).item();
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-300);
    }

    #[test]
    fn single_positive_without_negatives() {
        let mut tape = Tape::new();
        let p = row(&mut tape, &[0.3, -0.2, 0.9]);
        let w = contrastive(&mut tape, p, None, 0.1, P2pForm::AsWritten).unwrap();
        let l = contrastive(&mut tape, p, None, 0.1, P2pForm::LogForm).unwrap();
        assert!((tape.value(w).item() + 1.0).abs() < 1e-15);
        assert!(tape.value(l).item().abs() < 1e-15);
    }

    #[test]
    fn closed_form_ratio() {
        // Identical positives and one orthogonal negative at τ = 1.
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![5.0, 0.0]]).unwrap());
        let n = row(&mut tape, &[0.0, 3.0]);
        let w = contrastive(&mut tape, p, Some(n), 1.0, P2pForm::AsWritten).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.value(w).item() + e / (e + 1.0)).abs() < 1e-12);
        let l = contrastive(&mut tape, p, Some(n), 1.0, P2pForm::LogForm).unwrap();
        assert!((tape.value(l).item() + (e / (e + 1.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn p2p_gradient_matches_finite_differences() {
        let labels = [true, false, true, false, false, true, false, true, false];
        for form in [P2pForm::LogForm, P2pForm::AsWritten] {
            let cfg = LossConfig {
                tau: 0.5,
                p2p_form: form,
                ..LossConfig::default()
            };
            for seed in 0..5 {
                let f = uniform(&mut rng(seed), &[9, 3], -1.0, 1.0);
                let err = grad_check(&[f], 1e-5, |t, v| {
                    Ok(p2p_loss(t, v[0], &labels, &cfg, &mut rng(0))?.unwrap())
                });
                assert!(err < 1e-4, "{form:?} {err}");
            }
        }
    }

    #[test]
    fn p2p_skips_one_sided_labels() {
        let mut tape = Tape::new();
        let f = tape.constant(uniform(&mut rng(1), &[4, 3], -1.0, 1.0));
        let cfg = LossConfig::default();
        assert!(p2p_loss(&mut tape, f, &[true; 4], &cfg, &mut rng(0)).unwrap().is_none());
        assert!(p2p_loss(&mut tape, f, &[false; 4], &cfg, &mut rng(0)).unwrap().is_none());
        assert!(p2p_loss(&mut tape, f, &[true; 3], &cfg, &mut rng(0)).is_err());
    }

    #[test]
    fn negative_sampling_is_seeded_and_capped() {
        let labels: Vec<bool> = (0..200).map(|i| i % 10 == 0).collect();
        let f = uniform(&mut rng(3), &[200, 4], -1.0, 1.0);
        let cfg = LossConfig {
            max_negatives: 16,
            ..LossConfig::default()
        };
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let x = tape.constant(f.clone());
            let l = p2p_loss(&mut tape, x, &labels, &cfg, &mut rng(seed)).unwrap().unwrap();
            tape.value(l).item()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn moving_positive_toward_center_lowers_loss() {
        let eval = |p0: [f64; 2]| {
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::from_rows(&[p0.to_vec(), vec![1.0, 0.1], vec![1.0, -0.1]]).unwrap());
            let n = tape.constant(Tensor::from_rows(&[vec![-1.0, 0.5], vec![0.0, -1.0]]).unwrap());
            let l = contrastive(&mut tape, p, Some(n), 0.2, P2pForm::LogForm).unwrap();
            tape.value(l).item()
        };
        let far = eval([0.2, 1.0]);
        let near = eval([1.0, 0.3]);
        assert!(near < far, "{near} {far}");
        assert!(near >= 0.0);
    }

    #[test]
    fn total_weighting() {
        let mut tape = Tape::new();
        let (s, a, p) = (row(&mut tape, &[0.6]), row(&mut tape, &[0.5]), row(&mut tape, &[2.0]));
        let (s, a, p) = (
            tape.reshape(s, &[1]).unwrap(),
            tape.reshape(a, &[1]).unwrap(),
            tape.reshape(p, &[1]).unwrap(),
        );
        let cfg = LossConfig::default();
        let (_, r) = total_loss(&mut tape, s, a, Some(p), &cfg).unwrap();
        assert!((r.total - 1.2).abs() < 1e-12);

        let seg_only = LossConfig {
            lambda_area: 0.0,
            lambda_p2p: 0.0,
            ..cfg.clone()
        };
        let (_, r) = total_loss(&mut tape, s, a, Some(p), &seg_only).unwrap();
        assert_eq!(r.total, 0.6);

        let (_, r) = total_loss(&mut tape, s, a, None, &cfg).unwrap();
        assert!(r.p2p_skipped);
        assert!((r.total - 1.1).abs() < 1e-12);

        let nan = tape.constant(Tensor::scalar(f64::NAN));
        assert!(matches!(total_loss(&mut tape, nan, a, None, &cfg), Err(Error::Training(_))));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            tau: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            lambda_area: -1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn seg_loss_is_non_negative(xs in proptest::collection::vec(-30.0f64..30.0, 1..20), seed in 0u64..100) {
            let labels: Vec<bool> = xs.iter().enumerate().map(|(i, _)| (i as u64 + seed) % 3 == 0).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[xs.len()], xs.clone()).unwrap());
            let l = seg_loss(&mut tape, x, &labels).unwrap();
            prop_assert!(tape.value(l).item() >= 0.0);
        }

        #[test]
        fn area_loss_in_unit_interval(xs in proptest::collection::vec(-30.0f64..30.0, 1..20)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[xs.len()], xs.clone()).unwrap());
            let a = area_loss(&mut tape, x);
            let v = tape.value(a).item();
            prop_assert!(v > 0.0 && v < 1.0);
        }

        #[test]
        fn ratios_in_unit_interval(seed in 0u64..1000) {
            let mut r = rng(seed);
            let mut tape = Tape::new();
            let p = tape.constant(uniform(&mut r, &[3, 4], -1.0, 1.0));
            let n = tape.constant(uniform(&mut r, &[5, 4], -1.0, 1.0));
            let w = contrastive(&mut tape, p, Some(n), 0.1, P2pForm::AsWritten).unwrap();
            let l = contrastive(&mut tape, p, Some(n), 0.1, P2pForm::LogForm).unwrap();
            let mean_ratio = -tape.value(w).item();
            prop_assert!(mean_ratio > 0.0 && mean_ratio <= 1.0);
            prop_assert!(tape.value(l).item() >= 0.0);
        }

        #[test]
        fn total_is_linear_in_weights(ls in 0.0f64..5.0, la in 0.0f64..5.0, lp in 0.0f64..5.0) {
            let mut tape = Tape::new();
            let s = tape.constant(Tensor::scalar(0.7));
            let a = tape.constant(Tensor::scalar(0.3));
            let p = tape.constant(Tensor::scalar(1.9));
            let cfg = LossConfig { lambda_seg: ls, lambda_area: la, lambda_p2p: lp, ..LossConfig::default() };
            let (_, r) = total_loss(&mut tape, s, a, Some(p), &cfg).unwrap();
            prop_assert!((r.total - (ls * 0.7 + la * 0.3 + lp * 1.9)).abs() < 1e-12);
        }
    }
}

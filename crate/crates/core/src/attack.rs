//! L∞ projected gradient descent, adversarial accuracy and robustness ranking.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_class, cross_entropy, forward, predict};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::{Dataset, Sample, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// L∞ radius in pixel units.
    pub epsilon: f64,
    pub step_size: f64,
    pub iters: usize,
    /// Start from a uniform draw inside the ε-ball instead of the clean image.
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 4.0 / 255.0,
            step_size: 1.0 / 255.0,
            iters: 10,
            random_start: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::arg(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::arg(format!("step_size must be non-negative, got {}", self.step_size)));
        }
        Ok(())
    }
}

/// Untargeted PGD on the cross-entropy of the true label.
///
/// Each iteration steps along the sign of the loss gradient (`sign(0) = 0`)
/// and projects back onto the ε-ball around `x` and the `[0, 1]` box.
pub fn pgd(model: &Model, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<Tensor> {
    pgd_with_stream(model, x, label, cfg, 0)
}

/// [`pgd`] with the random start drawn from a caller-chosen stream of
/// `cfg.seed`, so attacks on different images get independent starts.
pub fn pgd_with_stream(model: &Model, x: &Tensor, label: usize, cfg: &AttackConfig, stream: u64) -> Result<Tensor> {
    cfg.validate()?;
    check_class(model, label)?;
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::arg("attack input must lie in [0, 1]"));
    }
    let eps = cfg.epsilon;
    let project = |adv: &mut Tensor| {
        for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
            *a = a.clamp(o - eps, o + eps).clamp(0.0, 1.0);
        }
    };

    let mut adv = x.clone();
    if cfg.random_start && eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        for a in adv.data_mut() {
            *a += rng.gen_range(-eps..=eps);
        }
        project(&mut adv);
    }
    for _ in 0..cfg.iters {
        let (logits, tape) = forward(model, &adv)?;
        let (_, dlogits) = cross_entropy(&logits, label);
        let grad = tape.backward(model, &dlogits, true, false)?.input.unwrap();
        for (a, g) in adv.data_mut().iter_mut().zip(grad.data()) {
            if *g > 0.0 {
                *a += cfg.step_size;
            } else if *g < 0.0 {
                *a -= cfg.step_size;
            }
        }
        project(&mut adv);
    }
    Ok(adv)
}

/// Per-sample adversarial predictions, in split order.
pub fn adv_predictions(model: &Model, ds: &Dataset, split: Split, cfg: &AttackConfig) -> Result<Vec<usize>> {
    let samples: Vec<(usize, &Sample)> = ds
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == split)
        .collect();
    samples
        .par_iter()
        .map(|&(i, s)| {
            let adv = pgd_with_stream(model, &s.image, s.label.index(), cfg, i as u64)?;
            Ok(predict(model, &adv)?.argmax())
        })
        .collect()
}

/// Accuracy on per-image PGD perturbations crafted against `model` itself.
pub fn adv_accuracy(model: &Model, ds: &Dataset, split: Split, cfg: &AttackConfig) -> Result<f64> {
    let labels: Vec<usize> = ds.split(split).map(|s| s.label.index()).collect();
    if labels.is_empty() {
        return Err(Error::EmptySplit(split.name().into()));
    }
    let preds = adv_predictions(model, ds, split, cfg)?;
    let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

fn check_percent(v: f64, what: &str) -> Result<()> {
    if !(0.0..=100.0).contains(&v) {
        return Err(Error::arg(format!("{what} must be a percentage in [0, 100], got {v}")));
    }
    Ok(())
}

/// Accuracy drop `clean - adv`, in percentage points.
pub fn delta_acc(clean: f64, adv: f64) -> Result<f64> {
    check_percent(clean, "clean accuracy")?;
    check_percent(adv, "adversarial accuracy")?;
    Ok(clean - adv)
}

/// One row of the robustness table; all values in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub model_id: String,
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub delta_acc: f64,
}

impl RobustnessReport {
    pub fn new(model_id: impl Into<String>, clean_acc: f64, adv_acc: f64) -> Result<Self> {
        Ok(RobustnessReport {
            model_id: model_id.into(),
            clean_acc,
            adv_acc,
            delta_acc: delta_acc(clean_acc, adv_acc)?,
        })
    }
}

/// Descending adversarial accuracy; ties by ascending ΔAcc, then model id.
pub fn rank_models(mut reports: Vec<RobustnessReport>) -> Result<Vec<RobustnessReport>> {
    if reports.is_empty() {
        return Err(Error::arg("no reports to rank"));
    }
    reports.sort_by(|a, b| {
        b.adv_acc
            .total_cmp(&a.adv_acc)
            .then(a.delta_acc.total_cmp(&b.delta_acc))
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
    Ok(reports)
}

/// `model,clean_acc,adv_acc,delta_acc` with two-decimal percentages.
pub fn reports_to_csv(reports: &[RobustnessReport]) -> String {
    let mut out = String::from("model,clean_acc,adv_acc,delta_acc\n");
    for r in reports {
        let _ = writeln!(out, "{},{:.2},{:.2},{:.2}", r.model_id, r.clean_acc, r.adv_acc, r.delta_acc);
    }
    out
}

/// Clean accuracy, adversarial accuracy and their drop for one model.
pub fn robustness_report(model_id: &str, model: &Model, ds: &Dataset, split: Split, cfg: &AttackConfig) -> Result<RobustnessReport> {
    let clean = crate::train::evaluate(model, ds, split)? * 100.0;
    let adv = adv_accuracy(model, ds, split, cfg)? * 100.0;
    RobustnessReport::new(model_id, clean, adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, LayerKind};

    /// Two-logit linear model `[w·x, -w·x]` on a 1x2x2 image.
    fn linear(w: [f64; 4]) -> Model {
        let mut weight = w.to_vec();
        weight.extend(w.iter().map(|v| -v));
        Model::new(
            [1, 2, 2],
            vec![
                Layer::stateless(LayerKind::Flatten),
                Layer::with_params(
                    1,
                    LayerKind::Dense { inputs: 4, outputs: 2 },
                    vec![Tensor::new(vec![2, 4], weight).unwrap(), Tensor::zeros(&[2])],
                )
                .unwrap(),
            ],
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    fn image(v: [f64; 4]) -> Tensor {
        Tensor::new(vec![1, 2, 2], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_radius_and_zero_iterations_are_identity() {
        let m = linear([0.3, -0.2, 0.0, 0.9]);
        let x = image([0.2, 0.5, 0.9, 0.0]);
        let cfg = AttackConfig { epsilon: 0.0, ..AttackConfig::default() };
        assert_eq!(pgd(&m, &x, 0, &cfg).unwrap(), x);
        let cfg = AttackConfig { iters: 0, ..AttackConfig::default() };
        assert_eq!(pgd(&m, &x, 1, &cfg).unwrap(), x);
    }

    #[test]
    fn linear_single_step_follows_loss_sign() {
        // For label 0 the loss decreases with w·x, so the attack moves along -sign(w).
        let w = [0.3, -0.2, 0.0, 0.9];
        let m = linear(w);
        let x = image([0.2, 0.5, 0.9, 0.0]);
        let cfg = AttackConfig {
            epsilon: 1.0,
            step_size: 0.1,
            iters: 1,
            ..AttackConfig::default()
        };
        for (label, dir) in [(0usize, -1.0), (1, 1.0)] {
            let adv = pgd(&m, &x, label, &cfg).unwrap();
            for (k, &wk) in w.iter().enumerate() {
                let sign = if wk > 0.0 { 1.0 } else if wk < 0.0 { -1.0 } else { 0.0 };
                let expected = (x.data()[k] + dir * cfg.step_size * sign).clamp(0.0, 1.0);
                assert_eq!(adv.data()[k], expected, "label {label} pixel {k}");
            }
        }
    }

    #[test]
    fn rejects_invalid_inputs() {
        let m = linear([1.0; 4]);
        let x = image([0.5; 4]);
        assert!(pgd(&m, &x, 2, &AttackConfig::default()).is_err());
        assert!(pgd(&m, &image([1.5, 0.0, 0.0, 0.0]), 0, &AttackConfig::default()).is_err());
        let bad = AttackConfig { epsilon: -1.0, ..AttackConfig::default() };
        assert!(pgd(&m, &x, 0, &bad).is_err());
    }

    #[test]
    fn random_start_is_seeded() {
        let m = linear([0.3, -0.2, 0.1, 0.9]);
        let x = image([0.2, 0.5, 0.9, 0.4]);
        let cfg = AttackConfig { random_start: true, iters: 0, seed: 3, ..AttackConfig::default() };
        let a = pgd(&m, &x, 0, &cfg).unwrap();
        assert_eq!(a, pgd(&m, &x, 0, &cfg).unwrap());
        assert_ne!(a, x);
        assert!(a.sub(&x).unwrap().max_abs() <= cfg.epsilon + 1e-12);
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta_acc(93.48, 0.0).unwrap(), 93.48);
        assert_eq!(delta_acc(50.0, 50.0).unwrap(), 0.0);
        assert_eq!(format!("{:.2}", delta_acc(99.21, 86.96).unwrap()), "12.25");
        assert!(delta_acc(101.0, 3.0).is_err());
        assert!(delta_acc(10.0, -3.0).is_err());
    }

    #[test]
    fn ranking_tie_rules() {
        let r = |id: &str, clean, adv| RobustnessReport::new(id, clean, adv).unwrap();
        let ranked = rank_models(vec![r("b", 70.0, 50.0), r("a", 60.0, 50.0)]).unwrap();
        assert_eq!(ranked[0].model_id, "a");
        let ranked = rank_models(vec![r("z", 60.0, 50.0), r("y", 60.0, 50.0)]).unwrap();
        assert_eq!(ranked[0].model_id, "y");
        assert_eq!(rank_models(vec![r("solo", 1.0, 0.5)]).unwrap().len(), 1);
        assert!(rank_models(Vec::new()).is_err());
    }

    #[test]
    fn csv_shape() {
        let rows = vec![RobustnessReport::new("m", 93.48, 0.0).unwrap()];
        assert_eq!(reports_to_csv(&rows), "model,clean_acc,adv_acc,delta_acc\nm,93.48,0.00,93.48\n");
    }
}

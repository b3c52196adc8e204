//! AdamW and RMSProp over adapter factors.
//!
//! Moments are allocated lazily and only for factors the optimizer may
//! update, keyed by `(site, slot)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterGrads, Slot};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    RmsProp,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" => Ok(OptimizerKind::AdamW),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::RmsProp => "rmsprop",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropHyper {
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsPropHyper {
    fn default() -> Self {
        Self { rho: 0.99, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub site: usize,
    pub slot: Slot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    /// Running mean of gradients; unused (`None`) by RMSProp.
    pub first: Option<Matrix<T>>,
    /// Running mean of squared gradients.
    pub second: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    kind: OptimizerKind,
    steps: u64,
    moments: BTreeMap<ParamKey, Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Completed update steps.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self, key: ParamKey) -> Option<&Moments<T>> {
        self.moments.get(&key)
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.moments.keys().copied()
    }

    fn expect_kind(&self, kind: OptimizerKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "optimizer state belongs to {}, cannot step with {kind}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Rejects mismatched or non-finite gradients before anything is mutated.
fn check_grads<T: Scalar>(adapters: &[Adapter<T>], grads: &[AdapterGrads<T>]) -> Result<()> {
    if adapters.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} gradient sets for {} adapters",
            grads.len(),
            adapters.len()
        )));
    }
    for (site, (ad, g)) in adapters.iter().zip(grads).enumerate() {
        for slot in ad.trainable_slots() {
            let param = ad.param(slot).expect("trainable slot exists");
            let grad = g
                .get(slot)
                .ok_or_else(|| Error::Shape(format!("missing gradient for site {site} {}", slot.name())))?;
            if grad.shape() != param.shape() {
                return Err(Error::Shape(format!(
                    "gradient for site {site} {} is {:?}, parameter is {:?}",
                    slot.name(),
                    grad.shape(),
                    param.shape()
                )));
            }
            if !grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of site {site} {}", slot.name())));
            }
        }
    }
    Ok(())
}

/// Decoupled-weight-decay Adam.
pub fn adamw_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    adapters: &mut [Adapter<T>],
    grads: &[AdapterGrads<T>],
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    state.expect_kind(OptimizerKind::AdamW)?;
    check_grads(adapters, grads)?;
    let t = state.steps as i32 + 1;
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let bias1 = T::one() - b1.powi(t);
    let bias2 = T::one() - b2.powi(t);
    let (lr_t, eps) = (T::lit(lr), T::lit(hyper.eps));
    let decay = T::one() - T::lit(lr * hyper.weight_decay);

    for (site, (ad, g)) in adapters.iter_mut().zip(grads).enumerate() {
        let slots: Vec<Slot> = ad.trainable_slots().collect();
        for slot in slots {
            let grad = g.get(slot).expect("checked");
            let param = ad.trainable_mut(slot).expect("trainable");
            let mom = state
                .moments
                .entry(ParamKey { site, slot })
                .or_insert_with(|| Moments {
                    first: Some(Matrix::zeros(param.rows(), param.cols())),
                    second: Matrix::zeros(param.rows(), param.cols()),
                });
            let first = mom.first.as_mut().expect("adam first moment");
            let iter = param
                .as_mut_slice()
                .iter_mut()
                .zip(first.as_mut_slice())
                .zip(mom.second.as_mut_slice())
                .zip(grad.as_slice());
            for (((p, m), v), &gr) in iter {
                *m = b1 * *m + (T::one() - b1) * gr;
                *v = b2 * *v + (T::one() - b2) * gr * gr;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p = *p * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    state.steps += 1;
    Ok(())
}

/// RMSProp: `v ← ρv + (1−ρ)g²`, `p ← p − lr·g/(√v + ε)`.
pub fn rmsprop_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    adapters: &mut [Adapter<T>],
    grads: &[AdapterGrads<T>],
    lr: f64,
    hyper: &RmsPropHyper,
) -> Result<()> {
    state.expect_kind(OptimizerKind::RmsProp)?;
    check_grads(adapters, grads)?;
    let (rho, lr_t, eps) = (T::lit(hyper.rho), T::lit(lr), T::lit(hyper.eps));

    for (site, (ad, g)) in adapters.iter_mut().zip(grads).enumerate() {
        let slots: Vec<Slot> = ad.trainable_slots().collect();
        for slot in slots {
            let grad = g.get(slot).expect("checked");
            let param = ad.trainable_mut(slot).expect("trainable");
            let mom = state
                .moments
                .entry(ParamKey { site, slot })
                .or_insert_with(|| Moments {
                    first: None,
                    second: Matrix::zeros(param.rows(), param.cols()),
                });
            let iter = param
                .as_mut_slice()
                .iter_mut()
                .zip(mom.second.as_mut_slice())
                .zip(grad.as_slice());
            for ((p, v), &gr) in iter {
                *v = rho * *v + (T::one() - rho) * gr * gr;
                *p -= lr_t * gr / (v.sqrt() + eps);
            }
        }
    }
    state.steps += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterConfig, TrainMask, Variant};
    use crate::linalg::random::{rng, standard_normal};

    fn nlora(mask: TrainMask) -> Adapter<f64> {
        let mut cfg = AdapterConfig::new(Variant::Nlora, 2);
        cfg.train_mask = mask;
        Adapter::init(standard_normal(5, 4, &mut rng(1)), &cfg, 0).unwrap()
    }

    fn grads_like(ad: &Adapter<f64>, fill: f64) -> AdapterGrads<f64> {
        let full = |m: &Matrix<f64>| Matrix::from_fn(m.rows(), m.cols(), |_, _| fill);
        AdapterGrads {
            a: full(ad.a()),
            n: ad.n().map(full),
            b: full(ad.b()),
        }
    }

    /// One-parameter adapter handle: a 2x2 base at rank 1 gives scalar N.
    fn scalar_adapter(value: f64) -> Adapter<f64> {
        let mut cfg = AdapterConfig::new(Variant::Slora, 1);
        cfg.train_mask = TrainMask::IntermediateOnly;
        Adapter::from_parts(
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 1),
            Some(Matrix::from_vec(1, 1, vec![value]).unwrap()),
            Matrix::zeros(1, 2),
            cfg,
        )
        .unwrap()
    }

    fn scalar_grad(g: f64) -> AdapterGrads<f64> {
        AdapterGrads {
            a: Matrix::zeros(2, 1),
            n: Some(Matrix::from_vec(1, 1, vec![g]).unwrap()),
            b: Matrix::zeros(1, 2),
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut ads = vec![nlora(TrainMask::All)];
        let before = ads.clone();
        let mut st = OptimizerState::new(OptimizerKind::AdamW);
        let g = vec![grads_like(&ads[0], 0.0)];
        adamw_step(&mut st, &mut ads, &g, 1e-2, &AdamHyper::default()).unwrap();
        assert_eq!(ads, before);
    }

    #[test]
    fn adam_scalar_hand_check() {
        // g = 0.5: m = 0.05, v = 0.00025, m̂ = 0.5, v̂ = 0.25,
        // p = 1 − 0.1·0.5/(0.5 + 1e-8).
        let mut ads = vec![scalar_adapter(1.0)];
        let mut st = OptimizerState::new(OptimizerKind::AdamW);
        adamw_step(&mut st, &mut ads, &[scalar_grad(0.5)], 0.1, &AdamHyper::default()).unwrap();
        let want = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((ads[0].n().unwrap()[(0, 0)] - want).abs() < 1e-15);
        let m = st.moments(ParamKey { site: 0, slot: Slot::N }).unwrap();
        assert!((m.first.as_ref().unwrap()[(0, 0)] - 0.05).abs() < 1e-15);
        assert!((m.second[(0, 0)] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn adam_weight_decay_is_decoupled() {
        let mut ads = vec![scalar_adapter(2.0)];
        let mut st = OptimizerState::new(OptimizerKind::AdamW);
        let hyper = AdamHyper {
            weight_decay: 0.5,
            ..AdamHyper::default()
        };
        adamw_step(&mut st, &mut ads, &[scalar_grad(0.0)], 0.1, &hyper).unwrap();
        assert!((ads[0].n().unwrap()[(0, 0)] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_scalar_hand_check() {
        // g = 0.5: v = 0.01·0.25 = 0.0025, p = 1 − 0.1·0.5/(0.05 + 1e-8).
        let mut ads = vec![scalar_adapter(1.0)];
        let mut st = OptimizerState::new(OptimizerKind::RmsProp);
        rmsprop_step(&mut st, &mut ads, &[scalar_grad(0.5)], 0.1, &RmsPropHyper::default()).unwrap();
        let want = 1.0 - 0.1 * 0.5 / (0.05 + 1e-8);
        assert!((ads[0].n().unwrap()[(0, 0)] - want).abs() < 1e-12);
        let mut zero = vec![scalar_adapter(1.0)];
        rmsprop_step(&mut st, &mut zero, &[scalar_grad(0.0)], 0.1, &RmsPropHyper::default()).unwrap();
        assert_eq!(zero[0].n().unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn switching_optimizer_is_rejected() {
        let mut ads = vec![scalar_adapter(1.0)];
        let mut st = OptimizerState::new(OptimizerKind::AdamW);
        adamw_step(&mut st, &mut ads, &[scalar_grad(0.1)], 0.1, &AdamHyper::default()).unwrap();
        let err = rmsprop_step(&mut st, &mut ads, &[scalar_grad(0.1)], 0.1, &RmsPropHyper::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn frozen_untouched_and_no_moments() {
        let mut ads = vec![nlora(TrainMask::IntermediateOnly)];
        let a0 = ads[0].a().clone();
        let b0 = ads[0].b().clone();
        let n0 = ads[0].n().unwrap().clone();
        let mut st = OptimizerState::new(OptimizerKind::AdamW);
        for _ in 0..100 {
            let g = vec![grads_like(&ads[0], 0.3)];
            adamw_step(&mut st, &mut ads, &g, 1e-2, &AdamHyper::default()).unwrap();
        }
        assert_eq!(ads[0].a(), &a0);
        assert_eq!(ads[0].b(), &b0);
        assert_ne!(ads[0].n().unwrap(), &n0);
        assert_eq!(st.keys().collect::<Vec<_>>(), vec![ParamKey { site: 0, slot: Slot::N }]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut ads = vec![nlora(TrainMask::All)];
        let before = ads.clone();
        let mut g = grads_like(&ads[0], 0.1);
        g.b.as_mut_slice()[0] = f64::INFINITY;
        let mut st = OptimizerState::new(OptimizerKind::AdamW);
        match adamw_step(&mut st, &mut ads, &[g], 1e-2, &AdamHyper::default()) {
            Err(Error::NonFinite(what)) => assert!(what.contains("B")),
            other => panic!("expected non-finite error, got {other:?}"),
        }
        assert_eq!(ads, before);
        assert_eq!(st.steps(), 0);
    }
}

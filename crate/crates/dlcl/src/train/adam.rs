//! Bias-corrected Adam over a parameter store.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NormPlacement;
use crate::tensor::ParamStore;

/// Adam moments configuration. beta2 defaults to 0.98 for post-norm models
/// and 0.997 for pre-norm models.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn for_placement(placement: NormPlacement) -> Self {
        let beta2 = match placement {
            NormPlacement::PostNorm => 0.98,
            NormPlacement::PreNorm => 0.997,
        };
        AdamConfig {
            beta1: 0.9,
            beta2,
            eps: 1e-8,
        }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second moment buffers plus the shared step counter.
pub struct AdamState {
    pub cfg: AdamConfig,
    pub t: usize,
    slots: Vec<Option<Slot>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        AdamState {
            cfg,
            t: 0,
            slots: (0..store.len()).map(|_| None).collect(),
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter, reading the
/// gradients accumulated on the store. A non-finite gradient aborts the step
/// before any parameter changes.
pub fn adam_step(store: &ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    assert_eq!(state.slots.len(), store.len(), "state built for this store");
    // validate first so a poisoned gradient leaves parameters untouched
    for p in store.iter() {
        if !p.trainable() {
            continue;
        }
        if p.grad().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: p.name().to_string(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (i, p) in store.iter().enumerate() {
        if !p.trainable() {
            continue;
        }
        let grad = p.grad();
        let slot = state.slots[i].get_or_insert_with(|| Slot {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        let mut value = p.value().clone();
        for j in 0..grad.len() {
            let g = grad[j];
            slot.m[j] = beta1 * slot.m[j] + (1.0 - beta1) * g;
            slot.v[j] = beta2 * slot.v[j] + (1.0 - beta2) * g * g;
            let m_hat = slot.m[j] / bias1;
            let v_hat = slot.v[j] / bias2;
            value[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.set_value(value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Parameter;

    fn store_with(values: &[(&str, Vec<f64>)]) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, v) in values {
            let p = Parameter::new(*name, &[v.len()], v.clone(), true).unwrap();
            store.register(p);
        }
        store
    }

    #[test]
    fn zero_gradient_is_a_fixpoint() {
        let store = store_with(&[("p", vec![0.5, -1.5])]);
        let mut state = AdamState::new(AdamConfig::for_placement(NormPlacement::PreNorm), &store);
        store.get("p").unwrap().accumulate_grad(&[0.0, 0.0]);
        adam_step(&store, &mut state, 1e-3).unwrap();
        assert_eq!(*store.get("p").unwrap().value(), vec![0.5, -1.5]);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_minus_lr() {
        // closed form at t=1: m_hat = 1, v_hat = 1, update = -lr / (1 + eps)
        let store = store_with(&[("p", vec![2.0])]);
        let cfg = AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        };
        let mut state = AdamState::new(cfg, &store);
        store.get("p").unwrap().accumulate_grad(&[1.0]);
        let lr = 1e-2;
        adam_step(&store, &mut state, lr).unwrap();
        let got = store.get("p").unwrap().value()[0];
        let want = 2.0 - lr / (1.0 + cfg.eps);
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        assert!((got - (2.0 - lr)).abs() < 1e-9);
    }

    #[test]
    fn identical_parameters_follow_identical_trajectories() {
        let store = store_with(&[("a", vec![1.0]), ("b", vec![1.0])]);
        let mut state = AdamState::new(AdamConfig::for_placement(NormPlacement::PostNorm), &store);
        for step in 0..5 {
            let g = 0.3 * (step as f64 + 1.0);
            store.get("a").unwrap().zero_grad();
            store.get("b").unwrap().zero_grad();
            store.get("a").unwrap().accumulate_grad(&[g]);
            store.get("b").unwrap().accumulate_grad(&[g]);
            adam_step(&store, &mut state, 1e-2).unwrap();
            assert_eq!(
                store.get("a").unwrap().value()[0],
                store.get("b").unwrap().value()[0]
            );
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_touching_values() {
        let store = store_with(&[("a", vec![1.0]), ("b", vec![2.0])]);
        let mut state = AdamState::new(AdamConfig::for_placement(NormPlacement::PreNorm), &store);
        store.get("a").unwrap().accumulate_grad(&[1.0]);
        store.get("b").unwrap().accumulate_grad(&[f64::NAN]);
        let err = adam_step(&store, &mut state, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
        assert_eq!(store.get("a").unwrap().value()[0], 1.0);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut store = ParamStore::new();
        store.register(Parameter::new("frozen", &[1], vec![3.0], false).unwrap());
        let mut state = AdamState::new(AdamConfig::for_placement(NormPlacement::PreNorm), &store);
        adam_step(&store, &mut state, 1e-2).unwrap();
        assert_eq!(store.get("frozen").unwrap().value()[0], 3.0);
    }
}

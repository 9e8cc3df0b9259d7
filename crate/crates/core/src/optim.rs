//! Bias-corrected Adam over a [`ParameterStore`].

use std::collections::BTreeMap;

use crate::error::{MsnError, Result};
use crate::params::{NamedGrads, ParameterStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One Adam update of every trainable tensor in `params`. Frozen tensors are
/// never touched; a gradient for one is an error, as is a non-finite gradient.
pub fn adam_step<T: Real>(
    params: &mut ParameterStore<T>,
    grads: &NamedGrads<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !params.is_trainable(name) {
            return Err(MsnError::NotFrozen(format!(
                "gradient supplied for frozen or unknown tensor {name}"
            )));
        }
        if !g.is_finite() {
            return Err(MsnError::NonFinite(format!("gradient of {name}")));
        }
        if g.shape() != params.get(name)?.shape() {
            return Err(MsnError::Shape(format!("gradient of {name} is {:?}", g.shape())));
        }
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let step = T::lit(lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(c.eps);
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let Some(g) = grads.get(&name) else {
            return Err(MsnError::MissingTensor(format!("gradient of {name}")));
        };
        let w = params.get_mut(&name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name)
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let it = w
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data());
        for (((w, m), v), &g) in it {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *w -= step * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        let n = values.len();
        s.insert("w", Tensor::from_vec(&[n], values).unwrap(), true);
        s.insert("frozen", Tensor::full(&[2], 3.0), false);
        s
    }

    fn grads(values: Vec<f64>) -> NamedGrads<f64> {
        let n = values.len();
        [("w".to_string(), Tensor::from_vec(&[n], values).unwrap())].into()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(vec![0.5, -1.0, 2.0]);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &grads(vec![1e-3, -7.0, 40.0]), &mut st, 0.01).unwrap();
        let w = s.get("w").unwrap().data();
        for (after, (before, sign)) in w.iter().zip([(0.5, 1.0), (-1.0, -1.0), (2.0, 1.0)]) {
            let moved = before - after;
            assert!((moved - sign * 0.01).abs() < 1e-7, "{moved}");
        }
        assert_eq!(s.get("frozen").unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(vec![0.25; 4]);
        let mut st = AdamState::new(AdamConfig::default());
        for _ in 0..50 {
            adam_step(&mut s, &grads(vec![0.0; 4]), &mut st, 0.1).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn minimises_quadratic() {
        let mut s = store(vec![1.0]);
        let mut st = AdamState::new(AdamConfig::default());
        for _ in 0..200 {
            let w = s.get("w").unwrap().data()[0];
            adam_step(&mut s, &grads(vec![2.0 * w]), &mut st, 0.05).unwrap();
        }
        assert!(s.get("w").unwrap().data()[0].abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut s = store(vec![1.0]);
        let mut st = AdamState::new(AdamConfig::default());
        assert!(matches!(
            adam_step(&mut s, &grads(vec![f64::NAN]), &mut st, 0.1),
            Err(MsnError::NonFinite(_))
        ));
        let mut g = grads(vec![1.0]);
        g.insert("frozen".into(), Tensor::zeros(&[2]));
        assert!(adam_step(&mut s, &g, &mut st, 0.1).is_err());
        assert_eq!(s.get("w").unwrap().data(), &[1.0]);
    }
}

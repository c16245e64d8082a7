use std::collections::BTreeMap;

use super::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    /// Standard defaults: `beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-8`.
    pub fn new(learning_rate: f64) -> Result<Self> {
        Self::with_betas(learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 {
            return Err(Error::invalid("betas must lie in [0, 1) and epsilon must be positive"));
        }
        Ok(AdamState {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first_moment.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second_moment.get(name).map(Vec::as_slice)
    }

    /// Applies one update in place. Fails without touching `params` if any
    /// gradient is non-finite or misshapen.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    format!("adam/{name}"),
                    format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let n = p.numel();
            let m = self.first_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn single(name: &str, value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::scalar(value));
        s
    }

    fn grad_of(store: &ParamStore, name: &str, value: f64) -> ParamGrads {
        let mut g = ParamGrads::zeros_like(store);
        g.get_mut(name).unwrap().data_mut()[0] = value;
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = single("w", 0.75);
        let mut adam = AdamState::new(0.1).unwrap();
        {
            let g = grad_of(&store, "w", 0.0);
            adam.step(&mut store, &g)
        }
        .unwrap();
        assert_eq!(store.get("w").unwrap().data()[0], 0.75);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 on the first step, so the update is -lr * g / (|g| + eps).
        let mut store = single("w", 0.0);
        let mut adam = AdamState::new(0.1).unwrap();
        {
            let g = grad_of(&store, "w", 1.0);
            adam.step(&mut store, &g)
        }
        .unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((store.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_reduce_convex_quadratic() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.5, -2.0]));
        let loss_of = |s: &ParamStore| -> (f64, ParamGrads) {
            let mut g = Graph::new();
            let w = g.param(s, "w").unwrap();
            let sq = g.mul(w, w).unwrap();
            let l = g.sum(sq);
            (g.value(l).data()[0], g.backward(l, s).unwrap())
        };
        let mut adam = AdamState::new(0.05).unwrap();
        let (before, grads) = loss_of(&store);
        adam.step(&mut store, &grads).unwrap();
        let (_, grads) = loss_of(&store);
        adam.step(&mut store, &grads).unwrap();
        let (after, _) = loss_of(&store);
        assert!(after < before, "{after} !< {before}");
        assert_eq!(adam.step_count(), 2);
        assert_eq!(adam.first_moment("w").unwrap().len(), 2);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut store = single("w", 1.0);
        let mut adam = AdamState::new(0.1).unwrap();
        let err = {
            let g = grad_of(&store, "w", f64::NAN);
            adam.step(&mut store, &g)
        };
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(store.get("w").unwrap().data()[0], 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        assert!(AdamState::new(0.0).is_err());
        assert!(AdamState::new(-1.0).is_err());
    }
}

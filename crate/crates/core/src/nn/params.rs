use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Bindings, Gradients};
use crate::rng::standard_normal;
use super::tensor::Tensor;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators of one entry. `steps` counts the updates
/// this entry has received, which drives its bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
    pub steps: u64,
}

impl Moments {
    fn zeros_like(t: &Tensor) -> Self {
        Self { first: Tensor::zeros(t.shape()), second: Tensor::zeros(t.shape()), steps: 0 }
    }
}

/// Named parameter tensors with their optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step_count: u64,
}

impl Bindings for ParamStore {
    fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry and resets its moments.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.moments.insert(name.clone(), Moments::zeros_like(&value));
        self.entries.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
    }

    pub fn set_moments(&mut self, name: &str, m: Moments) -> Result<(), NnError> {
        let Some(v) = self.entries.get(name) else {
            return Err(NnError::NameMismatch(format!("no entry `{name}`")));
        };
        if m.first.shape() != v.shape() || m.second.shape() != v.shape() {
            return Err(NnError::NameMismatch(format!("moment shape mismatch for `{name}`")));
        }
        self.moments.insert(name.to_string(), m);
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_step_count(&mut self, n: u64) {
        self.step_count = n;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Drops optimizer history, keeping the parameter values.
    pub fn reset_moments(&mut self) {
        for (k, v) in &self.entries {
            self.moments.insert(k.clone(), Moments::zeros_like(v));
        }
        self.step_count = 0;
    }

    /// Bias-corrected adaptive-moment update. `grads` must name exactly the
    /// entries of the store.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<(), NnError> {
        if grads.len() != self.entries.len() || grads.keys().any(|k| !self.entries.contains_key(k)) {
            let missing: Vec<_> = self.entries.keys().filter(|k| !grads.contains_key(*k)).collect();
            let extra: Vec<_> = grads.keys().filter(|k| !self.entries.contains_key(*k)).collect();
            return Err(NnError::NameMismatch(format!("missing {missing:?}, unexpected {extra:?}")));
        }
        self.adam_step_partial(grads, cfg)
    }

    /// Updates only the entries named in `grads`; other entries and their
    /// moments are left untouched.
    pub fn adam_step_partial(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<(), NnError> {
        for (name, g) in grads {
            let Some(p) = self.entries.get(name) else {
                return Err(NnError::NameMismatch(format!("unexpected gradient `{name}`")));
            };
            if p.shape() != g.shape() {
                return Err(NnError::NameMismatch(format!(
                    "gradient `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        for (name, g) in grads {
            let p = self.entries.get_mut(name).expect("checked");
            let m = self.moments.get_mut(name).expect("moments track entries");
            m.steps += 1;
            let bc1 = 1.0 - cfg.beta1.powi(m.steps as i32);
            let bc2 = 1.0 - cfg.beta2.powi(m.steps as i32);
            let (first, second) = (m.first.data_mut(), m.second.data_mut());
            for (((w, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(first.iter_mut()).zip(second.iter_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}

/// `rows × cols` matrix with orthonormal rows or columns (whichever is
/// fewer), scaled by `gain`. Modified Gram-Schmidt on a Gaussian draw.
pub fn init_orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    let (short, long) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| standard_normal(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            if rows <= cols {
                data[i * cols + j] = gain * x;
            } else {
                data[j * cols + i] = gain * x;
            }
        }
    }
    Tensor::from_parts(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t);
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with("w", Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
        let grads: Gradients = [("w".to_string(), Tensor::zeros(&[2]))].into();
        s.adam_step(&grads, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.5, -1.5]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with("w", Tensor::scalar(0.0));
        let grads: Gradients = [("w".to_string(), Tensor::scalar(1.0))].into();
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        s.adam_step(&grads, &cfg).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let w = s.get("w").unwrap().item();
        assert!((w + 0.1).abs() < 1e-8, "{w}");
    }

    #[test]
    fn name_mismatch_rejected() {
        let mut s = store_with("w", Tensor::scalar(0.0));
        let grads: Gradients = [("v".to_string(), Tensor::scalar(1.0))].into();
        assert!(matches!(s.adam_step(&grads, &AdamConfig::default()), Err(NnError::NameMismatch(_))));
        let none = Gradients::new();
        assert!(s.adam_step(&none, &AdamConfig::default()).is_err());
    }

    #[test]
    fn updates_replay_from_checkpoint() {
        let mut a = store_with("w", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let grads: Gradients = [("w".to_string(), Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap())].into();
        let cfg = AdamConfig::with_lr(0.01);
        a.adam_step(&grads, &cfg).unwrap();
        let saved = a.clone();
        a.adam_step(&grads, &cfg).unwrap();
        a.adam_step(&grads, &cfg).unwrap();
        let mut b = saved;
        b.adam_step(&grads, &cfg).unwrap();
        b.adam_step(&grads, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partial_step_leaves_other_entries() {
        let mut s = store_with("a", Tensor::scalar(1.0));
        s.insert("b", Tensor::scalar(2.0));
        let grads: Gradients = [("b".to_string(), Tensor::scalar(1.0))].into();
        s.adam_step_partial(&grads, &AdamConfig::with_lr(0.5)).unwrap();
        assert_eq!(s.get("a").unwrap().item(), 1.0);
        assert_eq!(s.moments("a").unwrap().steps, 0);
        assert!(s.get("b").unwrap().item() < 2.0);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g: Gradients = [("a".to_string(), Tensor::new(vec![2], vec![3.0, 4.0]).unwrap())].into();
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_init_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(4, 4), (3, 7), (7, 3)] {
            let t = init_orthogonal(r, c, 1.0, &mut rng);
            // Gram matrix of the shorter side is the identity.
            let (short, long, rowwise) = if r <= c { (r, c, true) } else { (c, r, false) };
            let at = |i: usize, j: usize| if rowwise { t.data()[i * c + j] } else { t.data()[j * c + i] };
            for i in 0..short {
                for j in 0..short {
                    let d: f64 = (0..long).map(|k| at(i, k) * at(j, k)).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-10);
                }
            }
        }
    }
}

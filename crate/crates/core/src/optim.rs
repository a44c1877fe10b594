//! Named parameter storage and the AdamW optimizer.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Trainable tensors in insertion order. Initializers draw from one seeded
/// stream, so the same insertion sequence and seed reproduce every value
/// bit for bit.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    entries: IndexMap<String, Tensor>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for ParameterStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: IndexMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter '{name}'")));
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Uniform on `±√(6 / (fan_in + fan_out))`, shaped `fan_in × fan_out`.
    pub fn init_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates and step counter for AdamW.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
    t: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, store: &ParameterStore) -> Self {
        let zeros = |_: &str, t: &Tensor| Tensor::zeros(t.shape());
        Self {
            config,
            m: store.iter().map(|(n, t)| (n.to_string(), zeros(n, t))).collect(),
            v: store.iter().map(|(n, t)| (n.to_string(), zeros(n, t))).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }

    /// One decoupled-weight-decay Adam update of every parameter.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &Gradients) -> Result<()> {
        for name in store.names() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            if g.shape() != store.require(name)?.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: store.require(name)?.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, theta) in store.entries.iter_mut() {
            let g = grads.get(name).expect("checked above").data();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape()))
                .data_mut();
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape()))
                .data_mut();
            for (((p, &gi), mi), vi) in theta.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *p -= c.lr * c.weight_decay * *p;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(pairs: &[(&str, Tensor)]) -> Gradients {
        let mut g = Gradients::default();
        for (n, t) in pairs {
            g.insert(*n, t.clone());
        }
        g
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut store = ParameterStore::new(1);
        store.init_normal("w", &[3, 2], 1.0).unwrap();
        let before = store.clone();
        let mut st = AdamWState::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        for _ in 0..5 {
            st.step(&mut store, &grads_of(&[("w", Tensor::zeros(&[3, 2]))])).unwrap();
        }
        assert_eq!(store, before);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParameterStore::new(1);
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        let mut st = AdamWState::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        st.step(&mut store, &grads_of(&[("w", Tensor::scalar(1.0))])).unwrap();
        let w = store.get("w").unwrap().item().unwrap();
        assert!((w + 0.005 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
    }

    #[test]
    fn decay_only_step() {
        let mut store = ParameterStore::new(1);
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut st = AdamWState::new(AdamWConfig { weight_decay: 1e-4, ..Default::default() }, &store);
        st.step(&mut store, &grads_of(&[("w", Tensor::scalar(0.0))])).unwrap();
        let w = store.get("w").unwrap().item().unwrap();
        assert_eq!(w, 1.0 - 0.005 * 1e-4);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParameterStore::new(1);
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut st = AdamWState::new(AdamWConfig::default(), &store);
        let err = st.step(&mut store, &Gradients::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "w"));
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut store = ParameterStore::new(3);
        store.init_normal("w", &[4], 1.0).unwrap();
        let mut st = AdamWState::new(AdamWConfig::default(), &store);
        for k in 0..10 {
            let g = Tensor::vector(vec![k as f64 - 5.0, -1.0, 0.5, 3.0]);
            st.step(&mut store, &grads_of(&[("w", g)])).unwrap();
        }
        assert!(st.second_moment("w").unwrap().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn same_seed_same_initialization() {
        let build = |seed| {
            let mut s = ParameterStore::new(seed);
            s.init_normal("e", &[5, 3], 0.02).unwrap();
            s.init_xavier("w", 3, 3).unwrap();
            s
        };
        let (a, b) = (build(42), build(42));
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_ne!(build(42), build(43));
    }
}

use super::{DiffError, ParamId, ParamStore};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Adam with bias correction over a fixed group of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    params: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, params: Vec<ParamId>) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|&id| vec![0.0; store.value(id).len()]).collect();
        Adam {
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            v: m.clone(),
            m,
            params,
        }
    }

    /// Adam over every parameter in `store`.
    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store, store.ids().collect())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &[f64], &[f64])> {
        self.params
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|(&id, (m, v))| (id, m.as_slice(), v.as_slice()))
    }

    pub(crate) fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<(), DiffError> {
        if m.len() != self.m.len()
            || v.len() != self.v.len()
            || m.iter().zip(&self.m).any(|(a, b)| a.len() != b.len())
            || v.iter().zip(&self.v).any(|(a, b)| a.len() != b.len())
        {
            return Err(DiffError::InvalidArgument("adam moment shapes differ".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update from the accumulated gradients; gradients are zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<(), DiffError> {
        for (k, &id) in self.params.iter().enumerate() {
            if store.value(id).len() != self.m[k].len() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam_step",
                    expected: vec![self.m[k].len()],
                    got: store.value(id).shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, &id) in self.params.iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((x, g), mi), vi) in p.value.data_mut().iter_mut().zip(&mut p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * *g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * *g * *g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
                *g = 0.0;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Adam::step`].
pub fn adam_step(store: &mut ParamStore, state: &mut Adam, lr: f64) -> Result<(), DiffError> {
    state.step(store, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Graph, Tensor};

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut store = ParamStore::new();
        let g = [0.3, -2.0, 1e-3, 7.5];
        let id = store.add("x", Tensor::new(&[4], vec![1.0; 4]).unwrap());
        store.get_mut(id).grad.copy_from_slice(&g);
        let mut adam = Adam::for_store(&store);
        adam.step(&mut store, 0.001).unwrap();
        for (x, gi) in store.value(id).data().iter().zip(g) {
            // t = 1: m_hat = g, v_hat = g^2
            let expected = 1.0 - 0.001 * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-12, "{x} vs {expected}");
        }
        assert!(store.grad(id).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let mut adam = Adam::for_store(&store);
        for _ in 0..5 {
            adam.step(&mut store, 0.1).unwrap();
        }
        assert_eq!(store.value(id).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let a = [1.5, -0.25, 3.0, 0.0, -2.0];
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::zeros(&[5]));
        let mut adam = Adam::for_store(&store);
        for _ in 0..200 {
            let mut gr = Graph::new();
            let x = gr.param(&store, id);
            let target = gr.constant(Tensor::new(&[5], a.to_vec()).unwrap());
            let d = gr.sub(x, target).unwrap();
            let sq = gr.square(d).unwrap();
            let loss = gr.sum(sq).unwrap();
            gr.backward(loss, &mut store).unwrap();
            adam.step(&mut store, 0.05).unwrap();
        }
        let err: f64 = store
            .value(id)
            .data()
            .iter()
            .zip(a)
            .map(|(x, a)| (x - a) * (x - a))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-3, "distance {err}");
    }
}

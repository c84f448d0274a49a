use super::params::{Gradients, ParamGroup, ParamStore};
use super::tape::Mat;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug)]
struct Moments {
    first: Mat,
    second: Mat,
    steps: u64,
}

/// Adam with bias correction. Moments are tracked per parameter, so a
/// group that is frozen during some steps keeps its own step count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: u64,
    moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Result<Self> {
        ensure!(learning_rate > 0.0 && learning_rate.is_finite(), Argument, "learning rate must be positive, got {learning_rate}");
        Ok(Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            moments: Vec::new(),
        })
    }

    /// Updates every parameter of `groups` that has a gradient. Nothing is
    /// written if any of those gradients is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, groups: &[ParamGroup]) -> Result<()> {
        let targets: Vec<_> = grads.iter().filter(|(id, _)| groups.contains(&store.group(*id))).collect();
        for (id, g) in &targets {
            ensure!(g.shape() == store.value(*id).shape(), Shape, "gradient for {} has shape {:?}", store.name(*id), g.shape());
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {}", store.name(*id))));
            }
        }
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in targets {
            let m = self.moments[id.0].get_or_insert_with(|| Moments {
                first: Mat::zeros(g.raw_dim()),
                second: Mat::zeros(g.raw_dim()),
                steps: 0,
            });
            m.steps += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(m.steps as i32);
            let c2 = 1.0 - b2.powi(m.steps as i32);
            let lr = self.learning_rate;
            let eps = self.epsilon;
            let value = store.value_mut(id);
            ndarray::Zip::from(value)
                .and(&mut m.first)
                .and(&mut m.second)
                .and(g)
                .for_each(|p, m1, m2, &g| {
                    *m1 = b1 * *m1 + (1.0 - b1) * g;
                    *m2 = b2 * *m2 + (1.0 - b2) * g * g;
                    *p -= lr * (*m1 / c1) / ((*m2 / c2).sqrt() + eps);
                });
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_store(p: f64) -> (ParamStore, crate::nn::ParamId) {
        let mut store = ParamStore::default();
        let id = store.insert(ParamGroup::ThetaE, "p", array![[p]]);
        (store, id)
    }

    fn grad_of_square(store: &ParamStore, id: crate::nn::ParamId) -> Gradients {
        let mut g = Gradients::zeros_like_none(store);
        g.accumulate(id, store.value(id) * 2.0);
        g
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let (mut store, id) = scalar_store(0.7);
        let mut g = Gradients::zeros_like_none(&store);
        g.accumulate(id, array![[0.0]]);
        let mut opt = Adam::new(0.1).unwrap();
        opt.step(&mut store, &g, &ParamGroup::ALL).unwrap();
        assert_eq!(store.value(id)[[0, 0]], 0.7);
        assert_eq!(opt.steps, 1);
    }

    #[test]
    fn descends_and_converges_on_square() {
        let (mut store, id) = scalar_store(1.0);
        let mut opt = Adam::new(0.1).unwrap();
        let g = grad_of_square(&store, id);
        opt.step(&mut store, &g, &ParamGroup::ALL).unwrap();
        let after_one = store.value(id)[[0, 0]];
        assert!(after_one < 1.0 && after_one > 0.0);
        for _ in 1..200 {
            let g = grad_of_square(&store, id);
            opt.step(&mut store, &g, &ParamGroup::ALL).unwrap();
        }
        assert!(store.value(id)[[0, 0]].abs() < 1e-2, "p = {}", store.value(id)[[0, 0]]);
    }

    #[test]
    fn rejects_non_finite_and_respects_groups() {
        let (mut store, id) = scalar_store(1.0);
        let mut g = Gradients::zeros_like_none(&store);
        g.accumulate(id, array![[f64::NAN]]);
        let mut opt = Adam::new(0.1).unwrap();
        let err = opt.step(&mut store, &g, &ParamGroup::ALL).unwrap_err();
        assert!(err.to_string().contains("theta_e/p"));
        let g = grad_of_square(&store, id);
        opt.step(&mut store, &g, &[ParamGroup::Phi]).unwrap();
        assert_eq!(store.value(id)[[0, 0]], 1.0);
        assert!(Adam::new(0.0).is_err());
    }
}

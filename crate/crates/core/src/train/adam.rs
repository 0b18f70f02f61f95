use ndarray::Zip;

use crate::model::ParamStore;
use crate::scalar::Scalar;

/// Plain Adam with bias correction and no learning-rate schedule.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: ParamStore<S>,
    v: ParamStore<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamStore<S>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every trainable entry of `params` from `grads`.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &ParamStore<S>) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::one() - S::lit(self.beta1.powi(t));
        let c2 = S::one() - S::lit(self.beta2.powi(t));
        let lr = S::lit(self.lr);
        let eps = S::lit(self.eps);
        let one = S::one();
        let entries = params.entries_mut();
        for (id, entry) in entries.iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            Zip::from(&mut entry.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ModelConfig;
    use crate::model::init_params;

    #[test]
    fn zero_gradient_is_identity() {
        let (_, mut p) = init_params::<f64>(&ModelConfig::miniature(), 1);
        let before = p.clone();
        let mut adam = Adam::new(&p, 1e-3);
        let zeros = p.zeros_like();
        for _ in 0..3 {
            adam.step(&mut p, &zeros);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (_, mut p) = init_params::<f64>(&ModelConfig::miniature(), 1);
        let before = p.clone();
        let mut g = p.zeros_like();
        for e in g.entries_mut() {
            e.value.fill(3.0);
        }
        let mut adam = Adam::new(&p, 0.01);
        adam.step(&mut p, &g);
        for (a, b) in p.entries().iter().zip(before.entries()) {
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                let expect = if a.trainable { y - 0.01 * 3.0 / (3.0 + 1e-8) } else { *y };
                assert!((x - expect).abs() < 1e-12);
            }
        }
    }
}

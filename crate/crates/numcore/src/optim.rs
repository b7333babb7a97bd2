use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers, in parameter order.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores state saved through [`Adam::moments`] and [`Adam::steps_taken`].
    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch");
        self.step = step;
        self.m = m;
        self.v = v;
    }

    pub fn step(&mut self, params: &mut ParamStore) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different store");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (values, grads) = params.values_and_grads_mut();
        for (((p, g), m), v) in values.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Piecewise-constant schedule: `initial` until `decay_epoch`, then
/// multiplied by `factor` (once).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub initial: f64,
    pub decay_epoch: usize,
    pub factor: f64,
}

impl StepDecay {
    /// Learning rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.initial * self.factor
        } else {
            self.initial
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(vec![2], vec![v, -v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(0.25);
        let before = p.values().to_vec();
        let mut adam = Adam::new(&p, 0.1);
        adam.step(&mut p);
        adam.step(&mut p);
        assert_eq!(p.values(), &before[..]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(0.0);
        let id = p.id("w").unwrap();
        let mut slope = Tensor::ones(&[2]);
        slope.data_mut()[1] = -1.0;
        let tape = crate::Tape::new();
        let vars = p.bind(&tape);
        let c = tape.constant(slope);
        let prod = tape.mul(vars[0], c).unwrap();
        let s = tape.sum(prod);
        tape.backward(s).unwrap();
        p.accumulate_grads(&tape, &vars);
        let mut adam = Adam::new(&p, 0.1);
        adam.step(&mut p);
        let w = p.value(id).data();
        assert!((w[0] + 0.1).abs() < 1e-6, "{w:?}");
        assert!((w[1] - 0.1).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn decay_applies_from_configured_epoch() {
        let s = StepDecay {
            initial: 1e-4,
            decay_epoch: 30,
            factor: 0.1,
        };
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(29), 1e-4);
        assert!((s.lr_at(30) - 1e-5).abs() < 1e-20);
        assert!((s.lr_at(45) - 1e-5).abs() < 1e-20);
    }
}

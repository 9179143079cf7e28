use crate::diffcore::{DiffError, ParamStore};
use crate::scalar::Scalar;

/// Adam with bias-corrected moments. Weight decay is an L2 term added to the
/// gradient before the moment updates.
#[derive(Clone, Debug)]
pub struct Adam<F = f64> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, weight_decay: F) -> Self {
        let zeros: Vec<Vec<F>> = store.iter().map(|(_, p)| vec![F::zero(); p.tensor.len()]).collect();
        Self {
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            eps: F::lit(1e-8),
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Vec<F>>], lr: F) -> Result<(), DiffError> {
        if grads.len() != store.len() {
            return Err(DiffError::Shape {
                op: "adam_step",
                dim: "gradient count".into(),
                expected: store.len(),
                found: grads.len(),
            });
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.tensor.len() {
                    return Err(DiffError::Shape {
                        op: "adam_step",
                        dim: format!("gradient length of {}", p.name),
                        expected: p.tensor.len(),
                        found: g.len(),
                    });
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(DiffError::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let i = id.index();
            let param = store.get_mut(id);
            let step_lr = lr * param.lr_multiplier;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in param.tensor.data_mut().iter_mut().enumerate() {
                let gj = g[j] + self.weight_decay * *w;
                m[j] = self.beta1 * m[j] + (F::one() - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (F::one() - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= step_lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

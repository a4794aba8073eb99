use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias-corrected moments; one accumulator pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(lr: f64, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
    ) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam: {} accumulators, {} parameters, {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() {
                return Err(Error::shape("adam parameter", m.shape(), p.shape()));
            }
            if g.shape() != m.shape() {
                return Err(Error::shape("adam gradient", m.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, g), (m, v)) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

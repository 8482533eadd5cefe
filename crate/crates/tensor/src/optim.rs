use crate::element::{el, Element};
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<E> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first: Vec<Tensor<E>>,
    pub second: Vec<Tensor<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(store: &ParamStore<E>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<E>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<E>, grads: &[Option<Tensor<E>>]) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(TensorError::dim("AdamW::update", "gradient count does not match store"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2): (E, E) = (el(self.beta1), el(self.beta2));
        let (one, eps) = (E::one(), el::<E>(self.eps));
        let step_size: E = el(self.lr / bc1);
        let inv_bc2_sqrt: E = el(1.0 / bc2.sqrt());
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (decay, trainable) = {
                let p = store.param(id);
                (p.decay, p.trainable)
            };
            if !trainable {
                continue;
            }
            let shrink: E = el(1.0 - self.lr * if decay { self.weight_decay } else { 0.0 });
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                p[j] = p[j] * shrink - step_size * m[j] / ((v[j]).sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm<E: Element>(grads: &[Option<Tensor<E>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.sq_norm().to_f64().unwrap_or(f64::NAN))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<E: Element>(grads: &mut [Option<Tensor<E>>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s: E = el(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

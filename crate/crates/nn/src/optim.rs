use crate::graph::Gradients;
use crate::params::Params;
use crate::{Float, Tensor};

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Float> Adam<S> {
    pub fn new(params: &Params<S>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            m: params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect(),
            v: params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every trainable parameter that received a
    /// gradient. Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, params: &mut Params<S>, grads: &Gradients<S>) -> f64 {
        let ids: Vec<_> = params.ids().filter(|id| params.is_trainable(*id)).collect();
        let norm = ids
            .iter()
            .filter_map(|id| grads.param(*id))
            .map(|g| g.sq_norm().as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step = S::from_f64(self.lr * bc2.sqrt() / bc1);
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let (ob1, ob2) = (S::one() - b1, S::one() - b2);
        let eps = S::from_f64(self.eps * bc2.sqrt());
        let clip = S::from_f64(clip);
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let i = id.index();
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * clip;
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                p[j] = p[j] - step * m[j] / (v[j].sqrt() + eps);
            }
        }
        norm
    }
}

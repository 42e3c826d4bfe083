//! Optimizers over parameter sets: Adam for the generation networks and
//! discriminators, SGD with momentum for the retrieval feature pathway.

use crate::graph::Gradients;
use crate::params::{Binding, ParamId, ParamSet};
use crate::scalar::Scalar;

const ADAM_EPS: f64 = 1e-8;

/// Gradients gathered for one optimizer step. Parameters whose graph leaves
/// received no gradient are simply absent (they are skipped, state untouched).
pub type GradList<S> = Vec<(ParamId, Vec<S>)>;

/// Pulls the gradients of `ids` out of a backward pass, skipping parameters
/// the loss never reached.
pub fn collect_grads<S: Scalar>(
    binding: &Binding,
    grads: &Gradients<S>,
    ids: &[ParamId],
) -> GradList<S> {
    ids.iter()
        .filter_map(|&id| grads.get(binding.var(id)).map(|g| (id, g.to_vec())))
        .collect()
}

/// Scales the whole gradient list so its global L2 norm is at most
/// `max_norm`; `max_norm <= 0` disables clipping. Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut GradList<S>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = S::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Per-parameter Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot<S> {
    pub t: u64,
    pub m: Vec<S>,
    pub v: Vec<S>,
}

/// Adam with bias correction; per-parameter step counts so skipped
/// parameters stay unbiased.
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    slots: Vec<Option<AdamSlot<S>>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, slots: Vec::new() }
    }

    pub fn step(&mut self, set: &mut ParamSet<S>, grads: &GradList<S>) {
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let one = S::one();
        let eps = S::of(ADAM_EPS);
        for (id, g) in grads {
            if self.slots.len() <= id.0 {
                self.slots.resize(id.0 + 1, None);
            }
            let slot = self.slots[id.0].get_or_insert_with(|| AdamSlot {
                t: 0,
                m: vec![S::zero(); g.len()],
                v: vec![S::zero(); g.len()],
            });
            slot.t += 1;
            let c1 = S::of(1.0 - self.beta1.powi(slot.t as i32));
            let c2 = S::of(1.0 - self.beta2.powi(slot.t as i32));
            let lr = S::of(self.lr);
            let p = set.value_mut(*id).data_mut();
            assert_eq!(p.len(), g.len(), "gradient length mismatch");
            for i in 0..g.len() {
                slot.m[i] = b1 * slot.m[i] + (one - b1) * g[i];
                slot.v[i] = b2 * slot.v[i] + (one - b2) * g[i] * g[i];
                let m_hat = slot.m[i] / c1;
                let v_hat = slot.v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn slot(&self, id: ParamId) -> Option<&AdamSlot<S>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn set_slot(&mut self, id: ParamId, slot: AdamSlot<S>) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0] = Some(slot);
    }
}

/// SGD with classical momentum (`v = mu v + g`, `p -= lr v`).
pub struct SgdMomentum<S> {
    pub lr: f64,
    pub momentum: f64,
    vel: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> SgdMomentum<S> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum, vel: Vec::new() }
    }

    pub fn step(&mut self, set: &mut ParamSet<S>, grads: &GradList<S>) {
        let mu = S::of(self.momentum);
        let lr = S::of(self.lr);
        for (id, g) in grads {
            if self.vel.len() <= id.0 {
                self.vel.resize(id.0 + 1, None);
            }
            let vel = self.vel[id.0].get_or_insert_with(|| vec![S::zero(); g.len()]);
            let p = set.value_mut(*id).data_mut();
            assert_eq!(p.len(), g.len(), "gradient length mismatch");
            for i in 0..g.len() {
                vel[i] = mu * vel[i] + g[i];
                p[i] -= lr * vel[i];
            }
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[S]> {
        self.vel.get(id.0).and_then(|v| v.as_deref())
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Vec<S>) {
        if self.vel.len() <= id.0 {
            self.vel.resize(id.0 + 1, None);
        }
        self.vel[id.0] = Some(v);
    }
}

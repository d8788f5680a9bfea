use crate::error::{Error, Result};
use crate::layers::{ParamKind, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// First and second moments per store entry; empty for buffers.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .entries()
            .iter()
            .map(|e| match e.kind {
                ParamKind::Learnable => vec![0.0; e.value.numel()],
                ParamKind::Buffer => Vec::new(),
            })
            .collect();
        Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every learnable entry. `grads` is indexed like the
    /// store; a learnable entry without a gradient is an error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} entries, store has {}, got {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        for id in store.ids() {
            let entry = store.entry(id);
            if entry.kind == ParamKind::Learnable && grads[id.index()].is_none() {
                return Err(Error::contract(format!("no gradient for parameter {}", entry.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids() {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            let entry = store.entry(id);
            if entry.kind != ParamKind::Learnable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let updated: Vec<f64> = entry
                .value
                .data()
                .iter()
                .zip(g)
                .enumerate()
                .map(|(j, (&p, &g))| {
                    let g = g + self.weight_decay * p;
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[j] / c1;
                    let v_hat = v[j] / c2;
                    p - lr * m_hat / (v_hat.sqrt() + self.eps)
                })
                .collect();
            store.set_data(id, updated)?;
        }
        Ok(())
    }
}

//! Host-side optimizers over named [`Var`]s.
//!
//! Updates run on `f64` vectors in a fixed parameter order, so repeated runs
//! are bit-identical.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::types::DEVICE;

struct Slot {
    name: String,
    var: Var,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Slot {
    fn new(name: String, var: Var) -> Self {
        let n = var.elem_count();
        Self {
            name,
            var,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn values(&self) -> Result<Vec<f64>> {
        Ok(self.var.as_tensor().flatten_all()?.to_vec1::<f64>()?)
    }

    fn store(&self, values: Vec<f64>) -> Result<()> {
        let t = Tensor::from_vec(values, self.var.dims(), &DEVICE)?;
        self.var.set(&t)?;
        Ok(())
    }

    /// Gradient of this slot; parameters absent from the graph get zeros.
    fn grad(&self, grads: &GradStore) -> Result<Vec<f64>> {
        match grads.get(self.var.as_tensor()) {
            Some(g) => Ok(g.flatten_all()?.to_vec1::<f64>()?),
            None => Ok(vec![0.0; self.m.len()]),
        }
    }
}

/// Plain Adam, used to pretrain the frozen stand-in networks.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: params.into_iter().map(|(n, v)| Slot::new(n, v)).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for slot in &mut self.slots {
            let g = slot.grad(grads)?;
            let mut p = slot.values()?;
            for i in 0..p.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            slot.store(p)?;
        }
        Ok(())
    }
}

/// Rectified Adam inner steps wrapped in Lookahead slow weights.
///
/// Every `k` inner steps the slow weights move `alpha` of the way towards the
/// fast weights, and the fast weights restart from there.
pub struct Ranger {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    k: u64,
    alpha: f64,
    t: u64,
    slots: Vec<Slot>,
    slow: Vec<Vec<f64>>,
}

/// Below this approximated SMA length the variance is not trusted and the
/// update falls back to bias-corrected momentum.
const RECTIFY_THRESHOLD: f64 = 5.0;

impl Ranger {
    pub fn new(params: Vec<(String, Var)>, lr: f64, k: u64, alpha: f64) -> Result<Self> {
        let slots: Vec<Slot> = params.into_iter().map(|(n, v)| Slot::new(n, v)).collect();
        let slow = slots.iter().map(Slot::values).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            k,
            alpha,
            t: 0,
            slots,
            slow,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let beta2_t = self.beta2.powi(t);
        let bc1 = 1.0 - self.beta1.powi(t);
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * self.t as f64 * beta2_t / (1.0 - beta2_t);
        let rect = if rho_t > RECTIFY_THRESHOLD {
            Some(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };
        let sync = self.t % self.k == 0;
        for (slot, slow) in self.slots.iter_mut().zip(self.slow.iter_mut()) {
            let g = slot.grad(grads)?;
            let mut p = slot.values()?;
            for i in 0..p.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = slot.m[i] / bc1;
                let update = match rect {
                    Some(r) => {
                        let adaptive = (1.0 - beta2_t).sqrt() / (slot.v[i].sqrt() + self.eps);
                        r * mhat * adaptive
                    }
                    None => mhat,
                };
                p[i] -= self.lr * update;
            }
            if sync {
                for i in 0..p.len() {
                    slow[i] += self.alpha * (p[i] - slow[i]);
                    p[i] = slow[i];
                }
            }
            slot.store(p)?;
        }
        Ok(())
    }

    /// Moments and slow weights under `opt.{m,v,slow}.{name}`.
    pub fn save_state(&self, ckpt: &mut Checkpoint) {
        ckpt.metadata.set("opt.t", self.t);
        for (slot, slow) in self.slots.iter().zip(&self.slow) {
            let shape = slot.var.dims().to_vec();
            ckpt.insert(format!("opt.m.{}", slot.name), shape.clone(), slot.m.clone());
            ckpt.insert(format!("opt.v.{}", slot.name), shape.clone(), slot.v.clone());
            ckpt.insert(format!("opt.slow.{}", slot.name), shape, slow.clone());
        }
    }

    pub fn load_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.t = ckpt.metadata.parse_req("opt.t")?;
        for (slot, slow) in self.slots.iter_mut().zip(self.slow.iter_mut()) {
            let (name, n) = (slot.name.clone(), slot.m.len());
            let fetch = |kind: &str| -> Result<Vec<f64>> {
                let arr = ckpt.array(&format!("opt.{kind}.{name}"))?;
                if arr.values.len() != n {
                    return Err(Error::shape(n, arr.values.len()));
                }
                Ok(arr.values.clone())
            };
            slot.m = fetch("m")?;
            slot.v = fetch("v")?;
            *slow = fetch("slow")?;
        }
        Ok(())
    }
}

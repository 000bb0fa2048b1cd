use serde::{Deserialize, Serialize};

use super::{Element, Param};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with per-parameter slots keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer<E> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub steps: u64,
    /// `(name, first moment / velocity, second moment)`, in visiting order.
    slots: Vec<(String, Vec<E>, Vec<E>)>,
}

impl<E: Element> Optimizer<E> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            steps: 0,
            slots: Vec::new(),
        }
    }

    /// Called once per update; `visit` must yield parameters in a stable order.
    pub fn step(&mut self, visit: impl FnOnce(&mut dyn FnMut(&str, &mut Param<E>))) {
        self.steps += 1;
        let t = self.steps as f64;
        let lr = self.learning_rate;
        let kind = self.kind;
        let slots = &mut self.slots;
        let mut index = 0usize;
        visit(&mut |name, p| {
            if slots.len() <= index {
                slots.push((name.to_string(), vec![E::ZERO; p.len()], vec![E::ZERO; p.len()]));
            }
            let (slot_name, m, v) = &mut slots[index];
            debug_assert_eq!(slot_name, name, "optimizer visited parameters out of order");
            match kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (E::from_f64(beta1), E::from_f64(beta2));
                    let (c1, c2) = (1.0 - beta1.powf(t), 1.0 - beta2.powf(t));
                    let step = E::from_f64(lr / c1);
                    let c2 = E::from_f64(c2);
                    let eps = E::from_f64(eps);
                    for i in 0..p.len() {
                        let g = p.grad[i];
                        m[i] = b1 * m[i] + (E::ONE - b1) * g;
                        v[i] = b2 * v[i] + (E::ONE - b2) * g * g;
                        p.value[i] -= step * m[i] / ((v[i] / c2).sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    let mu = E::from_f64(momentum);
                    let lr = E::from_f64(lr);
                    for i in 0..p.len() {
                        m[i] = mu * m[i] + p.grad[i];
                        p.value[i] -= lr * m[i];
                    }
                }
            }
            index += 1;
        });
    }

    /// Named slot arrays for checkpointing: `m.<param>` and `v.<param>`.
    pub fn export_slots(&self) -> Vec<(String, &[E])> {
        let mut out = Vec::with_capacity(self.slots.len() * 2);
        for (name, m, v) in &self.slots {
            out.push((format!("m.{name}"), m.as_slice()));
            out.push((format!("v.{name}"), v.as_slice()));
        }
        out
    }

    /// Restores slots previously produced by [`export_slots`](Self::export_slots).
    /// `names` gives the parameter visiting order.
    pub fn import_slots(
        &mut self,
        steps: u64,
        names: &[String],
        mut lookup: impl FnMut(&str) -> Option<Vec<E>>,
    ) -> Result<(), String> {
        let mut slots = Vec::with_capacity(names.len());
        if steps > 0 {
            for name in names {
                let m = lookup(&format!("m.{name}")).ok_or_else(|| format!("missing optimizer slot m.{name}"))?;
                let v = lookup(&format!("v.{name}")).ok_or_else(|| format!("missing optimizer slot v.{name}"))?;
                slots.push((name.clone(), m, v));
            }
        }
        self.slots = slots;
        self.steps = steps;
        Ok(())
    }
}

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers, one pair per parameter, plus the step count.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One Adam update with decoupled weight decay, consuming the gradients
/// held in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::shape("adam_step", format!("{} buffers for {} parameters", state.m.len(), store.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.len() != p.value.len() {
            return Err(Error::shape("adam_step", format!("buffer size mismatch for `{}`", p.name)));
        }
        let decay = 1.0 - lr * cfg.weight_decay;
        for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w *= decay;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            for g in &mut p.grad {
                *g *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            max_lr: 1e-3,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div: 1e4,
        }
    }
}

fn cos_interp(start: f64, end: f64, frac: f64) -> f64 {
    end + (start - end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

impl OneCycle {
    /// Cosine warm-up from `max_lr / div_factor` to `max_lr` over the first
    /// `pct_start` of the steps, then cosine decay to `max_lr / final_div`.
    pub fn lr(&self, step: usize, total_steps: usize) -> Result<f64> {
        if step > total_steps {
            return Err(Error::Invalid(format!("step {step} beyond schedule length {total_steps}")));
        }
        let initial = self.max_lr / self.div_factor;
        let last = self.max_lr / self.final_div;
        if total_steps == 0 {
            return Ok(initial);
        }
        let peak = self.pct_start * total_steps as f64;
        let s = step as f64;
        Ok(if s <= peak {
            if peak == 0.0 {
                self.max_lr
            } else {
                cos_interp(initial, self.max_lr, s / peak)
            }
        } else {
            cos_interp(self.max_lr, last, (s - peak) / (total_steps as f64 - peak))
        })
    }
}

/// Free-function form of [`OneCycle::lr`].
pub fn onecycle_lr(
    step: usize,
    total_steps: usize,
    max_lr: f64,
    pct_start: f64,
    div_factor: f64,
    final_div: f64,
) -> Result<f64> {
    OneCycle {
        max_lr,
        pct_start,
        div_factor,
        final_div,
    }
    .lr(step, total_steps)
}

//! AdamW, gradient clipping and the reduce-on-plateau schedule.

use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipMode {
    /// Clamp every gradient component to `[−c, c]`.
    Value,
    /// Rescale the whole gradient so its global L2 norm is at most `c`.
    Norm,
}

impl std::str::FromStr for ClipMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "value" => Ok(ClipMode::Value),
            "norm" => Ok(ClipMode::Norm),
            _ => Err(format!("unknown clip mode {s:?} (expected value or norm)")),
        }
    }
}

/// Clips `grads` in place and returns the global L2 norm before clipping.
pub fn clip_gradients<S: Scalar>(grads: &mut [Vec<S>], mode: ClipMode, c: S) -> S {
    let norm = grads.iter().flatten().map(|&g| g * g).sum::<S>().sqrt();
    match mode {
        ClipMode::Value => {
            for g in grads.iter_mut().flatten() {
                *g = g.max(-c).min(c);
            }
        }
        ClipMode::Norm => {
            if norm > c {
                let k = c / norm;
                for g in grads.iter_mut().flatten() {
                    *g = *g * k;
                }
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Moment estimates and step count of AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    /// Number of updates applied so far.
    pub step: u64,
    pub lr: f64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        OptimizerState {
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            step: 0,
            lr,
        }
    }

    /// One AdamW update with decoupled weight decay and bias-corrected moments.
    pub fn update(&mut self, params: &mut [&mut [S]], grads: &[Vec<S>], cfg: &AdamConfig) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        self.step += 1;
        let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
        let lr = S::of(self.lr);
        let decay = S::one() - lr * S::of(cfg.weight_decay);
        let t = self.step as i32;
        let inv_c1 = S::one() / (S::one() - b1.powi(t));
        let inv_c2 = S::one() / (S::one() - b2.powi(t));
        let eps = S::of(cfg.eps);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            assert_eq!(p.len(), g.len(), "gradient shape mismatch");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let mhat = m[i] * inv_c1;
                let vhat = v[i] * inv_c2;
                p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: u64,
    /// Relative improvement required to reset the patience counter.
    pub threshold: f64,
    pub lr_min: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { factor: 0.5, patience: 1000, threshold: 1e-4, lr_min: 1e-8 }
    }
}

/// Reduce-on-plateau: multiplies the learning rate by `factor` once the best
/// loss has not improved by `threshold·|best|` for `patience` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub config: SchedulerConfig,
    pub best: Option<f64>,
    pub bad_steps: u64,
}

impl PlateauScheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        PlateauScheduler { config, best: None, bad_steps: 0 }
    }

    /// Records one loss value and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(b) => loss < b - self.config.threshold * b.abs(),
        };
        if improved {
            self.best = Some(loss);
            self.bad_steps = 0;
            return lr;
        }
        self.bad_steps += 1;
        if self.bad_steps < self.config.patience {
            return lr;
        }
        self.bad_steps = 0;
        (lr * self.config.factor).max(self.config.lr_min).min(lr)
    }
}

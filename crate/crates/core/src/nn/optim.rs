//! Plain SGD and Ranger (RAdam inner optimizer wrapped in Lookahead).

use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Ranger,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "ranger" => Ok(Self::Ranger),
            other => Err(format!("unknown optimizer {other:?} (expected sgd or ranger)")),
        }
    }
}

/// Ranger hyperparameters; defaults follow the reference Ranger release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Lookahead sync period.
    pub k: u64,
    /// Lookahead blend factor.
    pub alpha: f64,
    /// The rectified update is used once the SMA length exceeds this.
    pub sma_threshold: f64,
}

impl Default for RangerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-5,
            k: 6,
            alpha: 0.5,
            sma_threshold: 5.0,
        }
    }
}

/// Multiplies the learning rate by `factor` every `every` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: u64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub ranger: RangerConfig,
    pub decay: Option<StepDecay>,
    step: u64,
    exp_avg: Vec<Vec<f64>>,
    exp_avg_sq: Vec<Vec<f64>>,
    slow: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            ranger: RangerConfig::default(),
            decay: None,
            step: 0,
            exp_avg: Vec::new(),
            exp_avg_sq: Vec::new(),
            slow: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn ranger(lr: f64) -> Self {
        Self::new(OptimizerKind::Ranger, lr)
    }

    pub fn with_ranger_config(mut self, config: RangerConfig) -> Self {
        self.ranger = config;
        self
    }

    pub fn with_decay(mut self, decay: StepDecay) -> Self {
        self.decay = Some(decay);
        self
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning rate applied at step `t` (1-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        match self.decay {
            Some(d) if d.every > 0 => self.lr * d.factor.powi(((t - 1) / d.every) as i32),
            _ => self.lr,
        }
    }

    /// Applies one update in place. `params[i]` and `grads[i]` must have equal
    /// length, and the parameter list must keep the same layout across calls.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), NnError> {
        if params.len() != grads.len() {
            return Err(NnError::Shape(format!(
                "{} parameter groups but {} gradient groups",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(NnError::Shape(format!(
                    "group {i}: {} parameters but {} gradients",
                    p.len(),
                    g.len()
                )));
            }
        }
        self.step += 1;
        let lr = self.lr_at(self.step);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.iter_mut().zip(g.iter()).for_each(|(p, g)| *p -= lr * g);
                }
            }
            OptimizerKind::Ranger => self.ranger_step(params, grads, lr)?,
        }
        Ok(())
    }

    fn ranger_step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<(), NnError> {
        let cfg = self.ranger;
        if !(cfg.alpha > 0.0 && cfg.alpha <= 1.0) || cfg.k == 0 {
            return Err(NnError::Shape(format!(
                "lookahead needs 0 < alpha <= 1 and k >= 1, got alpha={} k={}",
                cfg.alpha, cfg.k
            )));
        }
        if self.exp_avg.is_empty() {
            self.exp_avg = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.exp_avg_sq = self.exp_avg.clone();
            self.slow = params.iter().map(|p| p.to_vec()).collect();
        } else if self.exp_avg.len() != params.len()
            || self.exp_avg.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(NnError::Shape("parameter layout changed between steps".into()));
        }

        let t = self.step;
        let beta1_t = cfg.beta1.powi(t as i32);
        let beta2_t = cfg.beta2.powi(t as i32);
        let sma_max = 2.0 / (1.0 - cfg.beta2) - 1.0;
        let sma = sma_max - 2.0 * t as f64 * beta2_t / (1.0 - beta2_t);
        let rectified = sma > cfg.sma_threshold;
        let step_size = if rectified {
            let r = ((1.0 - beta2_t) * (sma - 4.0) / (sma_max - 4.0) * (sma - 2.0) / sma * sma_max
                / (sma_max - 2.0))
                .sqrt();
            lr * r / (1.0 - beta1_t)
        } else {
            lr / (1.0 - beta1_t)
        };

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.exp_avg[i];
            let v = &mut self.exp_avg_sq[i];
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                if rectified {
                    p[j] -= step_size * m[j] / (v[j].sqrt() + cfg.eps);
                } else {
                    p[j] -= step_size * m[j];
                }
            }
        }

        if t % cfg.k == 0 {
            for (p, slow) in params.iter_mut().zip(&mut self.slow) {
                for (fast, s) in p.iter_mut().zip(slow.iter_mut()) {
                    *s += cfg.alpha * (*fast - *s);
                    *fast = *s;
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn optimizer_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimizerState) -> Result<(), NnError> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_scalar(state: &mut OptimizerState, start: f64, steps: usize) -> Vec<f64> {
        let mut p = [start];
        let mut trace = Vec::new();
        for _ in 0..steps {
            let g = [2.0 * p[0]];
            state.step(&mut [&mut p[..]], &[&g[..]]).unwrap();
            trace.push(p[0]);
        }
        trace
    }

    #[test]
    fn sgd_step() {
        let mut state = OptimizerState::sgd(0.1);
        let mut p = [1.0];
        state.step(&mut [&mut p[..]], &[&[1.0][..]]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn ranger_with_trivial_lookahead_is_radam() {
        let sync_every_step = RangerConfig {
            alpha: 1.0,
            k: 1,
            ..RangerConfig::default()
        };
        let never_sync = RangerConfig {
            k: u64::MAX,
            ..RangerConfig::default()
        };
        let a = run_scalar(&mut OptimizerState::ranger(0.05).with_ranger_config(sync_every_step), 3.0, 40);
        let b = run_scalar(&mut OptimizerState::ranger(0.05).with_ranger_config(never_sync), 3.0, 40);
        assert_eq!(a, b);
    }

    #[test]
    fn radam_first_step_is_bias_corrected_momentum() {
        // t = 1: SMA length is 1 < 5, so p -= lr * m / (1 - beta1) = lr * g.
        let cfg = RangerConfig {
            k: u64::MAX,
            ..RangerConfig::default()
        };
        let trace = run_scalar(&mut OptimizerState::ranger(0.1).with_ranger_config(cfg), 3.0, 1);
        assert!((trace[0] - (3.0 - 0.1 * 6.0)).abs() < 1e-12);
    }

    #[test]
    fn ranger_converges_on_quadratic() {
        // lr 0.5: the first rectified steps are small and Lookahead halves
        // early progress, so the reference lr of 1e-3 would barely move p.
        let trace = run_scalar(&mut OptimizerState::ranger(0.5), 3.0, 50);
        assert!(trace.last().unwrap().abs() < 0.5, "{trace:?}");
    }

    #[test]
    fn step_decay() {
        let state = OptimizerState::sgd(1.0).with_decay(StepDecay {
            every: 10,
            factor: 0.1,
        });
        assert_eq!(state.lr_at(1), 1.0);
        assert_eq!(state.lr_at(10), 1.0);
        assert!((state.lr_at(11) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        for mut state in [OptimizerState::sgd(0.0), OptimizerState::ranger(0.0)] {
            let trace = run_scalar(&mut state, 3.0, 12);
            assert!(trace.iter().all(|&p| p == 3.0));
        }
    }

    #[test]
    fn mismatched_groups() {
        let mut state = OptimizerState::sgd(0.1);
        let mut p = [1.0, 2.0];
        assert!(state.step(&mut [&mut p[..]], &[&[1.0][..]]).is_err());
    }
}

//! Per-layer categorical policies trained with REINFORCE.
//!
//! Each searchable layer owns a vector of logits over its option set. The
//! controller ascends `A · Σ_l log π_l(α_l) − β · H_M`, where `A = r − r̄` is
//! the advantage against an exponential moving average of past rewards and
//! `H_M` is the summed policy entropy. A positive `β` therefore pulls the
//! policies toward lower entropy, and the cosine schedule ramps it from zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchChoice;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy (nats) of a probability vector; `0·log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPolicy {
    pub options: Vec<ArchChoice>,
    pub logits: Vec<f64>,
}

impl LayerPolicy {
    /// Uniform policy (all logits zero).
    pub fn uniform(options: Vec<ArchChoice>) -> Self {
        let logits = vec![0.0; options.len()];
        Self { options, logits }
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.probs())
    }

    pub fn argmax(&self) -> usize {
        // first maximum wins so ties resolve deterministically
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn len(&self) -> usize {
        self.options.len()
    }

    pub fn is_empty(&self) -> bool {
        self.options.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

/// Entropy-regularization weight at training progress `s ∈ [0, 1]`.
///
/// Cosine rises from 0 at `s = 0` to `beta_end` at `s = 1`. Out-of-range
/// progress is clamped.
pub fn beta_schedule(s: f64, beta_end: f64, kind: ScheduleKind) -> f64 {
    let s = if (0.0..=1.0).contains(&s) {
        s
    } else {
        log::warn!("schedule progress {s} outside [0, 1]; clamping");
        s.clamp(0.0, 1.0)
    };
    match kind {
        ScheduleKind::Constant => beta_end,
        ScheduleKind::Cosine => -0.5 * beta_end * (1.0 + (std::f64::consts::PI * s).cos()) + beta_end,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PolicyOptimizer {
    /// Plain gradient ascent.
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.95
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for PolicyOptimizer {
    fn default() -> Self {
        PolicyOptimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub learning_rate: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    pub warmup_fraction: f64,
    /// Decay of the reward moving average.
    pub reward_decay: f64,
    pub optimizer: PolicyOptimizer,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4.6e-3,
            beta_end: 0.5,
            schedule: ScheduleKind::Cosine,
            warmup_fraction: 0.25,
            reward_decay: 0.9,
            optimizer: PolicyOptimizer::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("controller.learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.beta_end >= 0.0 && self.beta_end.is_finite()) {
            return Err(format!("controller.beta_end must be non-negative, got {}", self.beta_end));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(format!(
                "controller.warmup_fraction must be in (0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.reward_decay) {
            return Err(format!("controller.reward_decay must be in [0, 1), got {}", self.reward_decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// What one controller step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub advantage: f64,
    pub beta: f64,
    pub updated: bool,
}

/// Controller state: policies, reward baseline and optimizer moments.
#[derive(Debug, Clone)]
pub struct Controller {
    policies: Vec<LayerPolicy>,
    reward_avg: Option<f64>,
    config: ControllerConfig,
    seed: u64,
    moments: Vec<AdamMoments>,
    adam_steps: u64,
}

impl Controller {
    pub fn new(policies: Vec<LayerPolicy>, config: ControllerConfig, seed: u64) -> Self {
        let moments = policies
            .iter()
            .map(|p| AdamMoments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            })
            .collect();
        Self {
            policies,
            reward_avg: None,
            config,
            seed,
            moments,
            adam_steps: 0,
        }
    }

    pub fn policies(&self) -> &[LayerPolicy] {
        &self.policies
    }

    pub fn policies_mut(&mut self) -> &mut [LayerPolicy] {
        &mut self.policies
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn reward_avg(&self) -> Option<f64> {
        self.reward_avg
    }

    pub fn set_reward_avg(&mut self, value: f64) {
        self.reward_avg = Some(value);
    }

    pub fn in_warmup(&self, progress: f64) -> bool {
        progress < self.config.warmup_fraction
    }

    /// Samples one option index per layer. Uniform during warmup, otherwise
    /// inverse-CDF on the softmax. Depends only on `(seed, step, progress, logits)`.
    pub fn sample(&self, step: u64, progress: f64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        let warmup = self.in_warmup(progress);
        self.policies
            .iter()
            .map(|p| {
                if warmup {
                    rng.gen_range(0..p.len())
                } else {
                    inverse_cdf(&p.probs(), rng.gen::<f64>())
                }
            })
            .collect()
    }

    pub fn choices(&self, indices: &[usize]) -> Vec<ArchChoice> {
        self.policies
            .iter()
            .zip(indices)
            .map(|(p, &i)| p.options[i])
            .collect()
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.policies.iter().map(LayerPolicy::argmax).collect()
    }

    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.policies.iter().map(LayerPolicy::probs).collect()
    }

    /// Total policy entropy `H_M`.
    pub fn model_entropy(&self) -> f64 {
        self.policies.iter().map(LayerPolicy::entropy).sum()
    }

    /// Returns `r − r̄` and folds `r` into the moving average. The first reward
    /// initializes the average, so its advantage is zero.
    pub fn advantage_update(&mut self, reward: f64) -> f64 {
        let avg = *self.reward_avg.get_or_insert(reward);
        let advantage = reward - avg;
        let d = self.config.reward_decay;
        self.reward_avg = Some(d * avg + (1.0 - d) * reward);
        advantage
    }

    /// The scalar policy objective `A · Σ log π_l(α_l) − β · H_M` that
    /// [`Controller::reinforce_step`] ascends.
    pub fn objective(&self, sampled: &[usize], advantage: f64, beta: f64) -> f64 {
        let log_lik: f64 = self
            .policies
            .iter()
            .zip(sampled)
            .map(|(p, &a)| p.probs()[a].ln())
            .sum();
        advantage * log_lik - beta * self.model_entropy()
    }

    /// Analytic gradient of [`Controller::objective`] w.r.t. every logit.
    pub fn policy_gradient(&self, sampled: &[usize], advantage: f64, beta: f64) -> Vec<Vec<f64>> {
        self.policies
            .iter()
            .zip(sampled)
            .map(|(p, &a)| {
                let probs = p.probs();
                let h = entropy(&probs);
                probs
                    .iter()
                    .enumerate()
                    .map(|(j, &pj)| {
                        let score = if j == a { 1.0 - pj } else { -pj };
                        let log_pj = if pj > 0.0 { pj.ln() } else { 0.0 };
                        // dH/dθ_j = −π_j (log π_j + H)
                        let entropy_grad = -pj * (log_pj + h);
                        advantage * score - beta * entropy_grad
                    })
                    .collect()
            })
            .collect()
    }

    /// One ascent step on the policy objective through the configured optimizer.
    pub fn reinforce_step(&mut self, sampled: &[usize], advantage: f64, beta: f64) {
        let grads = self.policy_gradient(sampled, advantage, beta);
        let lr = self.config.learning_rate;
        match self.config.optimizer {
            PolicyOptimizer::Sgd => {
                for (p, g) in self.policies.iter_mut().zip(&grads) {
                    for (l, gj) in p.logits.iter_mut().zip(g) {
                        *l += lr * gj;
                    }
                }
            }
            PolicyOptimizer::Adam { beta1, beta2, eps } => {
                self.adam_steps += 1;
                let t = self.adam_steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, g), mom) in self.policies.iter_mut().zip(&grads).zip(&mut self.moments) {
                    for j in 0..g.len() {
                        mom.m[j] = beta1 * mom.m[j] + (1.0 - beta1) * g[j];
                        mom.v[j] = beta2 * mom.v[j] + (1.0 - beta2) * g[j] * g[j];
                        let m_hat = mom.m[j] / c1;
                        let v_hat = mom.v[j] / c2;
                        p.logits[j] += lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }

    /// Full per-step bookkeeping: advantage always, policy update only after
    /// warmup, with `β` from the schedule at `progress`.
    pub fn observe(&mut self, sampled: &[usize], reward: f64, progress: f64) -> StepOutcome {
        let advantage = self.advantage_update(reward);
        let beta = beta_schedule(progress.clamp(0.0, 1.0), self.config.beta_end, self.config.schedule);
        let updated = !self.in_warmup(progress);
        if updated {
            self.reinforce_step(sampled, advantage, beta);
        }
        StepOutcome {
            advantage,
            beta,
            updated,
        }
    }
}

fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

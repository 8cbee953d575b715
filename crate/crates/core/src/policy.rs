//! Masked actor-critic trained by clipped proximal policy optimization.
//!
//! The per-sample objective that is maximized is
//!
//! ```text
//! min(r A, clip(r, 1 - eps, 1 + eps) A) - c1 (V - V_targ)^2 + c2 H(pi)
//! ```
//!
//! with `r = pi(a|s) / pi_old(a|s)`. Masked actions are excluded from the
//! softmax, so they carry probability zero and receive no gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::env::{Action, DiagnosisPolicy, Env, Observation};
use crate::error::{contract, Error, Result};
use crate::ndgrad::{clip_grad_norm, Activation, DenseNet, Optimizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub timesteps_per_update: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub shared: bool,
    pub normalize_advantages: bool,
    pub max_grad_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.0,
            gamma: 1.0,
            gae_lambda: 0.95,
            timesteps_per_update: 1024,
            epochs: 10,
            minibatch: 128,
            learning_rate: 1e-4,
            hidden: 128,
            shared: false,
            normalize_advantages: true,
            max_grad_norm: Some(0.5),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Spec(format!("clip must lie in (0, 1), got {}", self.clip)));
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return Err(Error::Spec("value and entropy coefficients must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Spec("gamma and GAE lambda must lie in [0, 1]".into()));
        }
        if self.timesteps_per_update == 0 || self.epochs == 0 || self.minibatch == 0 || self.hidden == 0 {
            return Err(Error::Spec("PPO sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Spec("PPO learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Policy and value heads over the state embedding. With `critic == None`
/// the actor network has one extra output holding the value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    actor: DenseNet,
    critic: Option<DenseNet>,
    n_actions: usize,
}

/// Cached forward pass for one state.
struct Pass {
    actor: crate::ndgrad::Tape,
    critic: Option<crate::ndgrad::Tape>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActMode {
    Sample,
    Greedy,
}

impl ActorCritic {
    pub fn new(input_dim: usize, n_actions: usize, hidden: usize, shared: bool, seed: u64) -> Result<Self> {
        if n_actions == 0 {
            return Err(contract("policy needs at least one action"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (actor, critic) = if shared {
            (DenseNet::new(&[input_dim, hidden, hidden, n_actions + 1], Activation::Tanh, &mut rng)?, None)
        } else {
            (
                DenseNet::new(&[input_dim, hidden, hidden, n_actions], Activation::Tanh, &mut rng)?,
                Some(DenseNet::new(&[input_dim, hidden, hidden, 1], Activation::Tanh, &mut rng)?),
            )
        };
        let mut ac = Self {
            actor,
            critic,
            n_actions,
        };
        // Start from a near-uniform policy.
        let n = ac.actor.num_params();
        let last = hidden * ac.actor.output_dim() + ac.actor.output_dim();
        for p in &mut ac.actor.params_mut()[n - last..] {
            *p *= 0.01;
        }
        Ok(ac)
    }

    pub fn for_env(env: &Env, cfg: &PpoConfig, seed: u64) -> Result<Self> {
        let e = env.embedder().embedding_len();
        Self::new(e, env.config().num_actions(), cfg.hidden, cfg.shared, seed)
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn input_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn is_shared(&self) -> bool {
        self.critic.is_none()
    }

    pub fn num_params(&self) -> usize {
        self.actor.num_params() + self.critic.as_ref().map_or(0, |c| c.num_params())
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.actor.params().to_vec();
        if let Some(c) = &self.critic {
            p.extend_from_slice(c.params());
        }
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(contract("actor-critic parameter length mismatch"));
        }
        let na = self.actor.num_params();
        self.actor.set_params(&params[..na])?;
        if let Some(c) = &mut self.critic {
            c.set_params(&params[na..])?;
        }
        Ok(())
    }

    fn pass(&self, embedding: &[f64]) -> Pass {
        Pass {
            actor: self.actor.forward_tape(embedding),
            critic: self.critic.as_ref().map(|c| c.forward_tape(embedding)),
        }
    }

    fn logits_of<'a>(&self, pass: &'a Pass) -> &'a [f64] {
        &pass.actor.output()[..self.n_actions]
    }

    fn value_of(&self, pass: &Pass) -> f64 {
        match &pass.critic {
            Some(t) => t.output()[0],
            None => pass.actor.output()[self.n_actions],
        }
    }

    pub fn logits(&self, embedding: &[f64]) -> Vec<f64> {
        let out = self.actor.forward(embedding);
        out[..self.n_actions].to_vec()
    }

    pub fn value(&self, embedding: &[f64]) -> f64 {
        match &self.critic {
            Some(c) => c.forward(embedding)[0],
            None => self.actor.forward(embedding)[self.n_actions],
        }
    }

    /// Renormalized action distribution over the valid actions.
    pub fn probabilities(&self, embedding: &[f64], valid: &[bool]) -> Result<Vec<f64>> {
        masked_softmax(&self.logits(embedding), valid)
    }

    /// Chooses an action index; returns `(action, log-prob, value)`.
    pub fn act<R: Rng + ?Sized>(&self, embedding: &[f64], valid: &[bool], mode: ActMode, rng: &mut R) -> Result<(usize, f64, f64)> {
        let pass = self.pass(embedding);
        let probs = masked_softmax(self.logits_of(&pass), valid)?;
        let a = match mode {
            ActMode::Greedy => {
                let mut best = None::<usize>;
                for (i, &p) in probs.iter().enumerate() {
                    if valid[i] && best.is_none_or(|b| p > probs[b]) {
                        best = Some(i);
                    }
                }
                best.expect("masked_softmax guarantees a valid action")
            }
            ActMode::Sample => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = None;
                for (i, &p) in probs.iter().enumerate() {
                    if p > 0.0 {
                        pick = Some(i);
                        acc += p;
                        if u < acc {
                            break;
                        }
                    }
                }
                pick.expect("masked_softmax guarantees a valid action")
            }
        };
        Ok((a, probs[a].ln(), self.value_of(&pass)))
    }

    /// Accumulates `d loss / d params` given gradients on logits and value.
    fn backward(&self, pass: &Pass, g_logits: &[f64], g_value: f64, grads: &mut [f64]) {
        let na = self.actor.num_params();
        let (ga, gc) = grads.split_at_mut(na);
        match (&self.critic, &pass.critic) {
            (Some(c), Some(t)) => {
                self.actor.backward(&pass.actor, g_logits, ga);
                c.backward(t, &[g_value], gc);
            }
            _ => {
                let mut g = g_logits.to_vec();
                g.push(g_value);
                self.actor.backward(&pass.actor, &g, ga);
            }
        }
    }
}

/// Softmax over entries with `valid[i] == true`; masked entries get exactly 0.
pub fn masked_softmax(logits: &[f64], valid: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != valid.len() {
        return Err(contract(format!("{} logits but {} mask entries", logits.len(), valid.len())));
    }
    let m = logits
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(contract("all actions are masked"));
    }
    if !m.is_finite() {
        return Err(Error::Numeric {
            layer: 0,
            msg: format!("policy logit is {m}"),
        });
    }
    let mut p: Vec<f64> = logits
        .iter()
        .zip(valid)
        .map(|(&l, &v)| if v { (l - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub embedding: Vec<f64>,
    pub valid: Vec<bool>,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
    /// Filled in when the episode ends.
    pub label: Option<Label>,
    pub classifier_version: u64,
}

/// Ordered on-policy experience; also the classifier's training queue.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutBuffer {
    pub steps: Vec<RolloutStep>,
    episode_start: usize,
}

impl RolloutBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn clear(&mut self) {
        self.steps.clear();
        self.episode_start = 0;
    }

    pub fn push(&mut self, step: RolloutStep) {
        self.steps.push(step);
    }

    /// Closes the open episode and stamps its steps with the true label.
    pub fn finish_episode(&mut self, label: Label) -> Result<()> {
        match self.steps.last() {
            Some(s) if s.done => {}
            _ => return Err(contract("episode must end with a diagnosis step")),
        }
        for s in &mut self.steps[self.episode_start..] {
            s.label = Some(label);
        }
        self.episode_start = self.steps.len();
        Ok(())
    }

    pub fn num_episodes(&self) -> usize {
        self.steps.iter().filter(|s| s.done).count()
    }

    /// Every trajectory ends with a terminal step and carries its label.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(contract("rollout buffer is empty"));
        }
        if !self.steps.last().is_some_and(|s| s.done) || self.episode_start != self.steps.len() {
            return Err(contract("rollout buffer ends mid-episode"));
        }
        if self.steps.iter().any(|s| s.label.is_none()) {
            return Err(contract("rollout step without a label"));
        }
        Ok(())
    }

    /// `(imputed state, label)` pairs for classifier training.
    pub fn classifier_examples(&self, dim: usize) -> Vec<(Vec<f64>, Label)> {
        self.steps
            .iter()
            .filter_map(|s| s.label.map(|l| (s.embedding[..dim].to_vec(), l)))
            .collect()
    }

    pub fn mean_episode_return(&self) -> f64 {
        let n = self.num_episodes();
        if n == 0 {
            return 0.0;
        }
        self.steps.iter().map(|s| s.reward).sum::<f64>() / n as f64
    }
}

/// Generalized advantage estimates and value targets, episode by episode.
/// Terminal steps bootstrap from 0.
pub fn gae_advantages(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = buffer.len();
    let mut adv = vec![0.0; n];
    let mut next_value = 0.0;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let s = &buffer.steps[t];
        if s.done {
            next_value = 0.0;
            next_adv = 0.0;
        }
        let delta = s.reward + gamma * next_value - s.value;
        adv[t] = delta + gamma * lambda * next_adv;
        next_value = s.value;
        next_adv = adv[t];
    }
    let targets = adv.iter().zip(&buffer.steps).map(|(a, s)| a + s.value).collect();
    (adv, targets)
}

/// Rescales to mean 0 and standard deviation 1 (population). Constant inputs map to 0.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in values.iter_mut() {
        *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Per-sample clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_objective(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_objective: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
    pub clip_fraction: f64,
}

/// Loss `-(clip - c1 * vf + c2 * ent)` over `idx` and its gradient.
pub fn ppo_loss_and_grad(
    ac: &ActorCritic,
    buffer: &RolloutBuffer,
    idx: &[usize],
    advantages: &[f64],
    targets: &[f64],
    cfg: &PpoConfig,
) -> Result<(PpoStats, Vec<f64>)> {
    let mut grads = vec![0.0; ac.num_params()];
    let mut stats = PpoStats::default();
    let inv = 1.0 / idx.len() as f64;
    let mut clipped = 0usize;
    for &i in idx {
        let s = &buffer.steps[i];
        let pass = ac.pass(&s.embedding);
        let probs = masked_softmax(ac.logits_of(&pass), &s.valid)?;
        let logp = probs[s.action].ln();
        let ratio = (logp - s.log_prob).exp();
        if !ratio.is_finite() {
            return Err(Error::Numeric {
                layer: ac.actor.num_layers(),
                msg: format!("probability ratio is {ratio} at step {i}"),
            });
        }
        let a = advantages[i];
        stats.policy_objective += clipped_objective(ratio, a, cfg.clip) * inv;
        let active = !((a > 0.0 && ratio > 1.0 + cfg.clip) || (a < 0.0 && ratio < 1.0 - cfg.clip));
        if !active {
            clipped += 1;
        }
        let entropy: f64 = -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        stats.entropy += entropy * inv;
        let v = ac.value_of(&pass);
        let verr = v - targets[i];
        stats.value_loss += verr * verr * inv;

        // Gradient of the minimized loss with respect to the logits.
        let mut g_logits = vec![0.0; ac.n_actions];
        for j in 0..ac.n_actions {
            if !s.valid[j] {
                continue;
            }
            let onehot = if j == s.action { 1.0 } else { 0.0 };
            let mut g = 0.0;
            if active {
                g -= a * ratio * (onehot - probs[j]);
            }
            if cfg.entropy_coef > 0.0 && probs[j] > 0.0 {
                g += cfg.entropy_coef * probs[j] * (probs[j].ln() + entropy);
            }
            g_logits[j] = g * inv;
        }
        let g_value = 2.0 * cfg.value_coef * verr * inv;
        ac.backward(&pass, &g_logits, g_value, &mut grads);
    }
    stats.total_loss = -(stats.policy_objective - cfg.value_coef * stats.value_loss + cfg.entropy_coef * stats.entropy);
    stats.clip_fraction = clipped as f64 / idx.len() as f64;
    Ok((stats, grads))
}

/// Optimizer state that persists across updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoLearner {
    pub config: PpoConfig,
    optimizer: Optimizer,
}

impl PpoLearner {
    pub fn new(ac: &ActorCritic, config: PpoConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: Optimizer::adam(ac.num_params()),
            config,
        })
    }

    /// Runs the configured epochs of minibatch updates on `buffer`. The old
    /// policy is the one that filled the buffer (its log-probs are stored).
    pub fn update<R: Rng + ?Sized>(&mut self, ac: &mut ActorCritic, buffer: &RolloutBuffer, rng: &mut R) -> Result<PpoStats> {
        buffer.validate()?;
        let cfg = &self.config;
        let (mut adv, targets) = gae_advantages(buffer, cfg.gamma, cfg.gae_lambda);
        if cfg.normalize_advantages {
            normalize(&mut adv);
        }
        let mut order: Vec<usize> = (0..buffer.len()).collect();
        let mut last = PpoStats::default();
        let mut params = ac.params();
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.minibatch) {
                let (stats, mut grads) = ppo_loss_and_grad(ac, buffer, chunk, &adv, &targets, cfg)?;
                if let Some(max) = cfg.max_grad_norm {
                    clip_grad_norm(&mut [&mut grads[..]], max);
                }
                self.optimizer.step(&mut params, &grads, cfg.learning_rate)?;
                ac.set_params(&params)?;
                last = stats;
            }
        }
        Ok(last)
    }
}

/// Runs the policy for at least `min_steps` steps, always finishing the last
/// episode, and appends the experience to `buffer`.
pub fn collect_rollouts<R: Rng + ?Sized>(
    env: &mut Env,
    ac: &ActorCritic,
    min_steps: usize,
    buffer: &mut RolloutBuffer,
    rng: &mut R,
) -> Result<()> {
    let n = env.config().scheme.num_panels();
    let start = buffer.len();
    while buffer.len() - start < min_steps.max(1) {
        let mut obs = env.reset()?;
        loop {
            let (a, logp, v) = ac.act(&obs.embedding, &obs.valid, ActMode::Sample, rng)?;
            let tr = env.step(Action::from_index(a, n)?)?;
            buffer.push(RolloutStep {
                embedding: obs.embedding,
                valid: obs.valid,
                action: a,
                log_prob: logp,
                reward: tr.reward,
                value: v,
                done: tr.done,
                label: None,
                classifier_version: obs.classifier_version,
            });
            match tr.next {
                Some(next) => obs = next,
                None => {
                    let label = tr.info.label.ok_or_else(|| contract("terminal step without label"))?;
                    buffer.finish_episode(label)?;
                    break;
                }
            }
        }
    }
    Ok(())
}

/// Adapter exposing an actor-critic as a [`DiagnosisPolicy`].
pub struct PolicyAgent<'a> {
    pub ac: &'a ActorCritic,
    pub mode: ActMode,
    rng: ChaCha8Rng,
}

impl<'a> PolicyAgent<'a> {
    pub fn new(ac: &'a ActorCritic, mode: ActMode, seed: u64) -> Self {
        Self {
            ac,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl DiagnosisPolicy for PolicyAgent<'_> {
    fn decide(&mut self, obs: &Observation) -> Result<Action> {
        let (a, _, _) = self.ac.act(&obs.embedding, &obs.valid, self.mode, &mut self.rng)?;
        Action::from_index(a, self.ac.n_actions - 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(reward: f64, value: f64, done: bool) -> RolloutStep {
        RolloutStep {
            embedding: vec![0.0],
            valid: vec![true, true],
            action: 0,
            log_prob: 0.5f64.ln(),
            reward,
            value,
            done,
            label: Some(Label::N),
            classifier_version: 0,
        }
    }

    fn buffer(steps: Vec<RolloutStep>) -> RolloutBuffer {
        let n = steps.len();
        RolloutBuffer {
            steps,
            episode_start: n,
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let p = masked_softmax(&[5.0, 0.0, 0.0], &[false, true, true]).unwrap();
        assert_eq!(p, vec![0.0, 0.5, 0.5]);
        assert!(masked_softmax(&[1.0, 2.0], &[false, false]).is_err());
    }

    #[test]
    fn masked_action_is_never_sampled() {
        let ac = ActorCritic::new(3, 4, 8, false, 1).unwrap();
        let valid = [false, true, true, false];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            counts[ac.act(&[0.3, -0.1, 0.7], &valid, ActMode::Sample, &mut rng).unwrap().0] += 1;
        }
        assert_eq!(counts[0] + counts[3], 0);
        assert!(counts[1] > 0 && counts[2] > 0);
    }

    #[test]
    fn equal_logits_over_two_valid_actions_split_evenly() {
        let mut ac = ActorCritic::new(1, 3, 4, false, 1).unwrap();
        let n = ac.actor.num_params();
        for p in &mut ac.actor.params_mut()[n - (4 * 3 + 3)..] {
            *p = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 20_000;
        let hits = (0..draws)
            .filter(|_| ac.act(&[0.2], &[false, true, true], ActMode::Sample, &mut rng).unwrap().0 == 1)
            .count();
        let sd = (draws as f64 * 0.25).sqrt();
        assert!((hits as f64 - draws as f64 / 2.0).abs() < 4.0 * sd);
        let (_, logp, _) = ac.act(&[0.2], &[false, true, true], ActMode::Sample, &mut rng).unwrap();
        assert!((logp - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy_mode_is_deterministic() {
        let ac = ActorCritic::new(2, 4, 8, true, 9).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        for k in 0..20 {
            let x = [k as f64 * 0.1, -0.3];
            let a = ac.act(&x, &[true; 4], ActMode::Greedy, &mut r1).unwrap();
            let b = ac.act(&x, &[true; 4], ActMode::Greedy, &mut r2).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gae_lambda_one_is_return_to_go_minus_value() {
        let b = buffer(vec![step(1.0, 0.3, false), step(-0.5, 0.2, false), step(2.0, 0.9, true)]);
        let (adv, targets) = gae_advantages(&b, 1.0, 1.0);
        let rtg = [2.5, 1.5, 2.0];
        for t in 0..3 {
            assert!((adv[t] - (rtg[t] - b.steps[t].value)).abs() < 1e-12);
            assert!((targets[t] - rtg[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_zero_rewards_zero_values() {
        let b = buffer(vec![step(0.0, 0.0, false), step(0.0, 0.0, true), step(0.0, 0.0, true)]);
        assert!(gae_advantages(&b, 1.0, 0.95).0.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn gae_hand_recursion() {
        let b = buffer(vec![step(0.1, 0.5, false), step(-0.2, 0.4, false), step(1.0, 0.6, true), step(3.0, 1.0, true)]);
        let (adv, _) = gae_advantages(&b, 1.0, 0.95);
        let d2 = 1.0 - 0.6;
        let d1 = -0.2 + 0.6 - 0.4;
        let d0 = 0.1 + 0.4 - 0.5;
        let a2 = d2;
        let a1 = d1 + 0.95 * a2;
        let a0 = d0 + 0.95 * a1;
        let expected = [a0, a1, a2, 3.0 - 1.0];
        for t in 0..4 {
            assert!((adv[t] - expected[t]).abs() < 1e-12, "{t}");
        }
    }

    #[test]
    fn clip_arithmetic() {
        assert!((clipped_objective(1.5, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((clipped_objective(0.5, -1.0, 0.2) + 0.8).abs() < 1e-12);
        assert!((clipped_objective(1.1, 1.0, 0.2) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn buffer_must_end_with_diagnosis() {
        let mut b = RolloutBuffer::new();
        b.push(step(0.0, 0.0, false));
        assert!(b.finish_episode(Label::P).is_err());
        assert!(b.validate().is_err());
        b.push(step(1.0, 0.0, true));
        b.finish_episode(Label::P).unwrap();
        b.validate().unwrap();
        assert_eq!(b.num_episodes(), 1);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for shared in [false, true] {
            let ac = ActorCritic::new(3, 4, 6, shared, 11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut b = RolloutBuffer::new();
            for k in 0..6 {
                let x = vec![0.1 * k as f64, -0.2, 0.5];
                let valid = vec![k % 2 == 0, true, true, k % 3 != 0];
                let (a, lp, v) = ac.act(&x, &valid, ActMode::Sample, &mut rng).unwrap();
                b.push(RolloutStep {
                    embedding: x,
                    valid,
                    action: a,
                    log_prob: lp + 0.05 * (k as f64 - 2.5),
                    reward: k as f64 * 0.3 - 0.4,
                    value: v,
                    done: k % 2 == 1,
                    label: Some(Label::P),
                    classifier_version: 0,
                });
            }
            let cfg = PpoConfig {
                entropy_coef: 0.3,
                ..Default::default()
            };
            let (adv, targets) = gae_advantages(&b, 1.0, 0.95);
            let idx: Vec<usize> = (0..b.len()).collect();
            let (_, g) = ppo_loss_and_grad(&ac, &b, &idx, &adv, &targets, &cfg).unwrap();
            let p0 = ac.params();
            let h = 1e-6;
            for i in (0..p0.len()).step_by(7) {
                let mut c = ac.clone();
                let mut p = p0.clone();
                p[i] += h;
                c.set_params(&p).unwrap();
                let up = ppo_loss_and_grad(&c, &b, &idx, &adv, &targets, &cfg).unwrap().0.total_loss;
                p[i] -= 2.0 * h;
                c.set_params(&p).unwrap();
                let dn = ppo_loss_and_grad(&c, &b, &idx, &adv, &targets, &cfg).unwrap().0.total_loss;
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "shared={shared} param {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn masked_logits_receive_no_gradient() {
        let ac = ActorCritic::new(2, 3, 5, false, 4).unwrap();
        let b = buffer(vec![RolloutStep {
            embedding: vec![0.4, 0.1],
            valid: vec![false, true, true],
            action: 1,
            log_prob: 0.4f64.ln(),
            reward: 1.0,
            value: 0.0,
            done: true,
            label: Some(Label::P),
            classifier_version: 0,
        }]);
        let cfg = PpoConfig {
            entropy_coef: 1.0,
            ..Default::default()
        };
        let (_, g) = ppo_loss_and_grad(&ac, &b, &[0], &[1.0], &[1.0], &cfg).unwrap();
        // Output bias of the masked action (last layer bias, entry 0).
        let na = ac.actor.num_params();
        assert_eq!(g[na - 3], 0.0);
        assert_ne!(g[na - 2], 0.0);
    }

    #[test]
    fn unmoved_policy_surrogate_gradient_is_vanilla_policy_gradient() {
        let ac = ActorCritic::new(2, 3, 8, false, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = RolloutBuffer::new();
        let mut adv = Vec::new();
        for k in 0..10 {
            let x = vec![0.3 * k as f64 - 1.0, 0.7];
            let valid = vec![true, k % 2 == 0, true];
            let (a, lp, v) = ac.act(&x, &valid, ActMode::Sample, &mut rng).unwrap();
            b.push(RolloutStep {
                embedding: x,
                valid,
                action: a,
                log_prob: lp,
                reward: 0.0,
                value: v,
                done: true,
                label: Some(Label::N),
                classifier_version: 0,
            });
            b.finish_episode(Label::N).unwrap();
            adv.push(((k * 37) % 11) as f64 / 5.0 - 1.0);
        }
        let cfg = PpoConfig {
            value_coef: 0.0,
            entropy_coef: 0.0,
            ..Default::default()
        };
        let idx: Vec<usize> = (0..b.len()).collect();
        let targets = vec![0.0; b.len()];
        let (_, g) = ppo_loss_and_grad(&ac, &b, &idx, &adv, &targets, &cfg).unwrap();

        // -mean(A * grad log pi(a|s)) through the actor alone.
        let mut vanilla = vec![0.0; ac.actor.num_params()];
        for (s, &a) in b.steps.iter().zip(&adv) {
            let tape = ac.actor.forward_tape(&s.embedding);
            let p = masked_softmax(tape.output(), &s.valid).unwrap();
            let gl: Vec<f64> = (0..3)
                .map(|j| {
                    let onehot = if j == s.action { 1.0 } else { 0.0 };
                    if s.valid[j] { -a * (onehot - p[j]) / b.len() as f64 } else { 0.0 }
                })
                .collect();
            ac.actor.backward(&tape, &gl, &mut vanilla);
        }
        for (x, y) in g.iter().zip(&vanilla) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    /// One-step bandit with two diagnosis actions and rewards `r`.
    fn bandit_buffer(ac: &ActorCritic, r: [f64; 2], n: usize, rng: &mut ChaCha8Rng) -> RolloutBuffer {
        let mut b = RolloutBuffer::new();
        for _ in 0..n {
            let (a, lp, v) = ac.act(&[1.0], &[true, true], ActMode::Sample, rng).unwrap();
            b.push(RolloutStep {
                embedding: vec![1.0],
                valid: vec![true, true],
                action: a,
                log_prob: lp,
                reward: r[a],
                value: v,
                done: true,
                label: Some(Label::N),
                classifier_version: 0,
            });
            b.finish_episode(Label::N).unwrap();
        }
        b
    }

    #[test]
    fn bandit_preference_rises_monotonically() {
        let mut ac = ActorCritic::new(1, 2, 16, false, 3).unwrap();
        let cfg = PpoConfig {
            value_coef: 0.0,
            entropy_coef: 0.0,
            timesteps_per_update: 256,
            epochs: 1,
            minibatch: 256,
            learning_rate: 1e-3,
            max_grad_norm: None,
            ..Default::default()
        };
        let mut learner = PpoLearner::new(&ac, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut prev = ac.probabilities(&[1.0], &[true, true]).unwrap()[0];
        for _ in 0..50 {
            let b = bandit_buffer(&ac, [1.0, 0.3], 256, &mut rng);
            learner.update(&mut ac, &b, &mut rng).unwrap();
            let p = ac.probabilities(&[1.0], &[true, true]).unwrap()[0];
            assert!(p > prev, "{p} <= {prev}");
            prev = p;
        }
    }

    #[test]
    fn bandit_converges_to_better_arm() {
        let cfg = PpoConfig {
            timesteps_per_update: 256,
            ..Default::default()
        };
        let mut ac = ActorCritic::new(1, 2, cfg.hidden, cfg.shared, 5).unwrap();
        let mut learner = PpoLearner::new(&ac, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let b = bandit_buffer(&ac, [1.0, 0.0], 256, &mut rng);
            learner.update(&mut ac, &b, &mut rng).unwrap();
        }
        let p = ac.probabilities(&[1.0], &[true, true]).unwrap()[0];
        assert!(p >= 0.99, "{p}");
    }

    #[test]
    fn strong_entropy_keeps_policy_uniform() {
        let cfg = PpoConfig {
            entropy_coef: 10.0,
            timesteps_per_update: 128,
            ..Default::default()
        };
        let mut ac = ActorCritic::new(1, 3, 32, false, 7).unwrap();
        let mut learner = PpoLearner::new(&ac, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let valid = [true, false, true];
        for _ in 0..100 {
            let mut b = RolloutBuffer::new();
            for _ in 0..128 {
                let (a, lp, v) = ac.act(&[1.0], &valid, ActMode::Sample, &mut rng).unwrap();
                b.push(RolloutStep {
                    embedding: vec![1.0],
                    valid: valid.to_vec(),
                    action: a,
                    log_prob: lp,
                    reward: 0.0,
                    value: v,
                    done: true,
                    label: Some(Label::N),
                    classifier_version: 0,
                });
                b.finish_episode(Label::N).unwrap();
            }
            learner.update(&mut ac, &b, &mut rng).unwrap();
        }
        let p = ac.probabilities(&[1.0], &valid).unwrap();
        let tv = 0.5 * ((p[0] - 0.5).abs() + (p[2] - 0.5).abs());
        assert!(tv <= 0.05, "{p:?}");
    }
}

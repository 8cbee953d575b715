//! Episodic test-ordering MDP with shaped rewards.
//!
//! Actions are indexed `0..D` for the panels, `D` for diagnosing P and `D + 1`
//! for diagnosing N. Rewards follow the shaped table
//!
//! ```text
//! panel k      : rho * c(k) / cost_unit
//! diagnose P   : lambda * 1{y = P}
//! diagnose N   : 1{y = N}
//! ```
//!
//! and the return is undiscounted.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::dataset::{random_panel_mask, Label, ObservationMask, PanelScheme, PatientRecord};
use crate::encoder::Encoder;
use crate::error::{contract, Error, Result};

/// Discount factor; episodes are short and always terminate.
pub const GAMMA: f64 = 1.0;

/// Default currency amount corresponding to one unit of shaped cost.
pub const DEFAULT_COST_UNIT: f64 = 100.0;

/// Weights of the shaped objective `TN + lambda * TP + rho * Cost`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapingParams {
    pub lambda: f64,
    pub rho: f64,
}

impl ShapingParams {
    pub fn new(lambda: f64, rho: f64) -> Result<Self> {
        let s = Self { lambda, rho };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Spec(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.rho <= 0.0) || !self.rho.is_finite() {
            return Err(Error::Spec(format!("rho must be <= 0, got {}", self.rho)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    /// Random patient, each panel initially observed with probability 1/2.
    Train,
    /// Patients in order, only the visible features observed.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub scheme: PanelScheme,
    pub shaping: ShapingParams,
    pub cost_unit: f64,
    pub reset_mode: ResetMode,
}

impl EnvConfig {
    pub fn new(scheme: PanelScheme, shaping: ShapingParams, reset_mode: ResetMode) -> Self {
        Self {
            scheme,
            shaping,
            cost_unit: DEFAULT_COST_UNIT,
            reset_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shaping.validate()?;
        if !(self.cost_unit > 0.0) {
            return Err(Error::Spec(format!("cost unit must be positive, got {}", self.cost_unit)));
        }
        Ok(())
    }

    /// Maximum episode length: every panel once, then a diagnosis.
    pub fn step_cap(&self) -> usize {
        self.scheme.num_panels() + 1
    }

    pub fn num_actions(&self) -> usize {
        self.scheme.num_panels() + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Panel(usize),
    Diagnose(Label),
}

impl Action {
    pub fn index(self, n_panels: usize) -> usize {
        match self {
            Action::Panel(k) => k,
            Action::Diagnose(Label::P) => n_panels,
            Action::Diagnose(Label::N) => n_panels + 1,
        }
    }

    pub fn from_index(i: usize, n_panels: usize) -> Result<Self> {
        match i {
            k if k < n_panels => Ok(Action::Panel(k)),
            k if k == n_panels => Ok(Action::Diagnose(Label::P)),
            k if k == n_panels + 1 => Ok(Action::Diagnose(Label::N)),
            _ => Err(Error::InvalidAction(format!("action index {i} with {n_panels} panels"))),
        }
    }

    pub fn is_diagnosis(self) -> bool {
        matches!(self, Action::Diagnose(_))
    }
}

/// Reward of taking `action` for a patient whose true label is `label`.
pub fn shaped_reward(cfg: &EnvConfig, label: Label, action: Action) -> Result<f64> {
    match action {
        Action::Panel(k) => {
            if k >= cfg.scheme.num_panels() {
                return Err(Error::InvalidAction(format!("panel {k} does not exist")));
            }
            Ok(cfg.shaping.rho * cfg.scheme.panel(k).cost / cfg.cost_unit)
        }
        Action::Diagnose(Label::P) => Ok(if label.is_positive() { cfg.shaping.lambda } else { 0.0 }),
        Action::Diagnose(Label::N) => Ok(if label.is_positive() { 0.0 } else { 1.0 }),
    }
}

/// Frozen encoder + classifier snapshot producing `(imp(x⊙M), f(imp(x⊙M)), M)`.
#[derive(Debug, Clone)]
pub struct StateEmbedder {
    encoder: Arc<Encoder>,
    classifier: Arc<Classifier>,
    version: u64,
}

impl StateEmbedder {
    pub fn new(encoder: Arc<Encoder>, classifier: Arc<Classifier>, version: u64) -> Result<Self> {
        if encoder.dim() != classifier.dim() {
            return Err(contract(format!(
                "encoder dimension {} differs from classifier input {}",
                encoder.dim(),
                classifier.dim()
            )));
        }
        Ok(Self {
            encoder,
            classifier,
            version,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn embedding_len(&self) -> usize {
        2 * self.dim() + 2
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn encoder(&self) -> &Arc<Encoder> {
        &self.encoder
    }

    pub fn classifier(&self) -> &Arc<Classifier> {
        &self.classifier
    }

    /// `observed` may be narrower than the mask when a purchased cell is
    /// missing in the source record.
    pub fn embed(&self, masked_x: &[f64], mask: &ObservationMask, observed: &[bool]) -> Result<Vec<f64>> {
        let imputed = self.encoder.impute(masked_x, observed)?;
        let probs = self.classifier.predict_proba(&imputed);
        let mut out = Vec::with_capacity(self.embedding_len());
        out.extend_from_slice(&imputed);
        out.extend_from_slice(&probs);
        out.extend(mask.as_f64());
        Ok(out)
    }
}

/// What a policy sees at a decision point.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub embedding: Vec<f64>,
    pub masked_features: Vec<f64>,
    pub mask: ObservationMask,
    /// One flag per action index.
    pub valid: Vec<bool>,
    pub classifier_version: u64,
}

impl Observation {
    /// The imputed-state block of the embedding.
    pub fn imputed(&self) -> &[f64] {
        &self.embedding[..self.mask.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub action: Action,
    pub record_index: usize,
    /// Ground truth, revealed when the episode ends.
    pub label: Option<Label>,
    /// Currency spent so far in the episode (including this step).
    pub episode_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next: Option<Observation>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One recorded step of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub embedding: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Anything that maps an observation to an action.
pub trait DiagnosisPolicy {
    fn decide(&mut self, obs: &Observation) -> Result<Action>;
}

#[derive(Debug, Clone)]
struct Episode {
    record: usize,
    mask: ObservationMask,
    cost: f64,
    steps: usize,
}

pub struct Env {
    cfg: EnvConfig,
    pool: Arc<Vec<PatientRecord>>,
    embedder: StateEmbedder,
    rng: ChaCha8Rng,
    cursor: usize,
    episode: Option<Episode>,
}

impl Env {
    pub fn new(cfg: EnvConfig, pool: Arc<Vec<PatientRecord>>, embedder: StateEmbedder, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if pool.is_empty() {
            return Err(contract("environment needs a non-empty record pool"));
        }
        if embedder.dim() != cfg.scheme.d() {
            return Err(contract(format!(
                "embedder dimension {} differs from scheme dimension {}",
                embedder.dim(),
                cfg.scheme.d()
            )));
        }
        if let Some(r) = pool.iter().find(|r| r.dim() != cfg.scheme.d()) {
            return Err(contract(format!("record '{}' has dimension {}", r.id, r.dim())));
        }
        Ok(Self {
            cfg,
            pool,
            embedder,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: 0,
            episode: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.scheme.d()
    }

    pub fn embedder(&self) -> &StateEmbedder {
        &self.embedder
    }

    pub fn pool(&self) -> &Arc<Vec<PatientRecord>> {
        &self.pool
    }

    /// Swaps the frozen encoder/classifier snapshot (between outer loops).
    pub fn set_embedder(&mut self, embedder: StateEmbedder) -> Result<()> {
        if embedder.dim() != self.dim() {
            return Err(contract("embedder dimension changed"));
        }
        self.embedder = embedder;
        Ok(())
    }

    /// Starts an episode according to the configured reset mode.
    pub fn reset(&mut self) -> Result<Observation> {
        match self.cfg.reset_mode {
            ResetMode::Train => {
                let idx = self.rng.random_range(0..self.pool.len());
                let mask = random_panel_mask(&self.cfg.scheme, &mut self.rng);
                self.reset_with(idx, mask)
            }
            ResetMode::Eval => {
                let idx = self.cursor % self.pool.len();
                self.cursor += 1;
                self.reset_with(idx, self.cfg.scheme.initial_mask())
            }
        }
    }

    /// Starts an episode for a specific record and initial mask.
    pub fn reset_with(&mut self, record: usize, mask: ObservationMask) -> Result<Observation> {
        if record >= self.pool.len() {
            return Err(contract(format!("record index {record} out of range")));
        }
        if mask.len() != self.dim() || !mask.is_panel_atomic(&self.cfg.scheme) {
            return Err(contract("initial mask must be panel-atomic with visible features on"));
        }
        self.episode = Some(Episode {
            record,
            mask,
            cost: 0.0,
            steps: 0,
        });
        self.observe()
    }

    pub fn valid_actions(&self) -> Vec<bool> {
        let n_panels = self.cfg.scheme.num_panels();
        let mut valid = vec![true; n_panels + 2];
        if let Some(ep) = &self.episode {
            for (k, v) in valid.iter_mut().take(n_panels).enumerate() {
                *v = !ep.mask.panel_observed(&self.cfg.scheme, k);
            }
        }
        valid
    }

    fn observe(&self) -> Result<Observation> {
        let ep = self.episode.as_ref().ok_or_else(|| contract("no active episode"))?;
        let rec = &self.pool[ep.record];
        let masked = ep.mask.apply(&rec.features);
        let observed: Vec<bool> = ep
            .mask
            .bits
            .iter()
            .zip(&rec.source_missing)
            .map(|(&m, &miss)| m && !miss)
            .collect();
        let masked: Vec<f64> = masked.iter().zip(&observed).map(|(&v, &o)| if o { v } else { 0.0 }).collect();
        let embedding = self.embedder.embed(&masked, &ep.mask, &observed)?;
        Ok(Observation {
            embedding,
            masked_features: masked,
            mask: ep.mask.clone(),
            valid: self.valid_actions(),
            classifier_version: self.embedder.version,
        })
    }

    pub fn step(&mut self, action: Action) -> Result<Transition> {
        let scheme = &self.cfg.scheme;
        let ep = self.episode.as_mut().ok_or_else(|| contract("step called without an active episode"))?;
        let label = self.pool[ep.record].label;
        let record_index = ep.record;
        let reward = shaped_reward(&self.cfg, label, action)?;
        ep.steps += 1;
        match action {
            Action::Panel(k) => {
                if ep.mask.panel_observed(scheme, k) {
                    return Err(Error::InvalidAction(format!("panel {k} is already observed")));
                }
                ep.mask.observe_panel(scheme, k);
                ep.cost += scheme.panel(k).cost;
                debug_assert!(ep.steps <= self.cfg.step_cap());
                let info = StepInfo {
                    action,
                    record_index,
                    label: None,
                    episode_cost: ep.cost,
                };
                let next = self.observe()?;
                Ok(Transition {
                    next: Some(next),
                    reward,
                    done: false,
                    info,
                })
            }
            Action::Diagnose(_) => {
                let info = StepInfo {
                    action,
                    record_index,
                    label: Some(label),
                    episode_cost: ep.cost,
                };
                self.episode = None;
                Ok(Transition {
                    next: None,
                    reward,
                    done: true,
                    info,
                })
            }
        }
    }
}

/// Plays one full episode from `obs` and returns its steps.
pub fn run_episode(env: &mut Env, policy: &mut dyn DiagnosisPolicy, mut obs: Observation) -> Result<Vec<TrajectoryStep>> {
    let mut steps = Vec::new();
    loop {
        let action = policy.decide(&obs)?;
        let tr = env.step(action)?;
        steps.push(TrajectoryStep {
            embedding: obs.embedding.clone(),
            action,
            reward: tr.reward,
            done: tr.done,
            info: tr.info,
        });
        match tr.next {
            Some(next) => obs = next,
            None => return Ok(steps),
        }
    }
}

/// Diagnoses the same label immediately.
pub struct ConstantPolicy(pub Label);

impl DiagnosisPolicy for ConstantPolicy {
    fn decide(&mut self, _obs: &Observation) -> Result<Action> {
        Ok(Action::Diagnose(self.0))
    }
}

/// Uniform over the currently valid actions.
pub struct UniformRandomPolicy {
    rng: ChaCha8Rng,
}

impl UniformRandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl DiagnosisPolicy for UniformRandomPolicy {
    fn decide(&mut self, obs: &Observation) -> Result<Action> {
        let valid: Vec<usize> = (0..obs.valid.len()).filter(|&i| obs.valid[i]).collect();
        let pick = valid[self.rng.random_range(0..valid.len())];
        Action::from_index(pick, obs.valid.len() - 2)
    }
}

/// Trivial snapshot: depth-0 encoder with a standard-normal base and an
/// all-zero classifier. Useful for hand-written policies.
pub fn trivial_embedder(dim: usize) -> Result<StateEmbedder> {
    let cfg = crate::encoder::EmConfig {
        flow_depth: 0,
        ..Default::default()
    };
    let encoder = Encoder::new(dim, cfg, 0)?;
    let classifier = Classifier::zeros(dim, 2)?;
    StateEmbedder::new(Arc::new(encoder), Arc::new(classifier), 0)
}

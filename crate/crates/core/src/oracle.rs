//! Exact computations on tiny finite instances: policy enumeration, backward
//! induction on shaped rewards, occupancy measures, and certificates that the
//! shaped solutions cover the cost-F1 and cost-AM fronts.
//!
//! An observation state is a set of purchased panels together with the
//! observed (binary) feature values. Given a patient profile the dynamics are
//! deterministic, and within one policy each state is reached along a single
//! path, so the policy space is a tree of independent choices.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, Panel, PanelScheme, PatientRecord};
use crate::env::{trivial_embedder, Action, DiagnosisPolicy, EnvConfig, Observation, ResetMode, ShapingParams};
use crate::error::{contract, Error, Result};
use crate::io::{derive_seed, sha256_hex};
use crate::metrics::{am_linear, evaluate_policy, f1_score, ConfusionTally};
use crate::pareto::SweepGrid;

pub const DEFAULT_STATE_BOUND: usize = 4096;
pub const MAX_PROFILES: usize = 16;
/// Default cap on the number of policies a full enumeration may visit.
pub const DEFAULT_POLICY_BOUND: usize = 1 << 21;
/// Absolute tolerance of the exact dominance checks.
pub const DOMINANCE_TOL: f64 = 1e-9;
const TIE_TOL: f64 = 1e-12;

/// `a <= b` up to summation-order noise in costs.
fn cost_le(a: f64, b: f64) -> bool {
    a <= b + TIE_TOL * (1.0 + b.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub values: Vec<bool>,
    pub label: Label,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularInstance {
    pub name: String,
    pub scheme: PanelScheme,
    pub profiles: Vec<Profile>,
    /// Currency amount per unit of shaped cost.
    pub cost_unit: f64,
    pub state_bound: usize,
}

/// Sum of joint masses of a policy's outcomes. `cost` is in currency.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub cost: f64,
}

impl FrontierPoint {
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            cost: self.cost + o.cost,
        }
    }

    pub fn tally(&self) -> ConfusionTally {
        ConfusionTally::new(self.tp, self.tn, self.fp, self.fn_, self.cost)
    }

    pub fn f1(&self) -> f64 {
        f1_score(&self.tally())
    }

    fn dominates(&self, o: &Self) -> bool {
        self.tp >= o.tp && self.tn >= o.tn && self.cost <= o.cost
    }
}

impl TabularInstance {
    /// One binary test costing 10; 20% positives; the test agrees with the
    /// label with probability 0.9.
    pub fn reference() -> Self {
        let scheme = PanelScheme::from_layout(vec![("T", 10.0, vec![0])], vec![]).expect("static scheme");
        let p = |v: bool, label, prob| Profile {
            values: vec![v],
            label,
            prob,
        };
        Self {
            name: "reference".into(),
            scheme,
            profiles: vec![
                p(true, Label::P, 0.18),
                p(false, Label::P, 0.02),
                p(false, Label::N, 0.72),
                p(true, Label::N, 0.08),
            ],
            cost_unit: 10.0,
            state_bound: DEFAULT_STATE_BOUND,
        }
    }

    /// Random instance with generic (continuous) costs and probabilities. The
    /// cost unit is the cheapest panel.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_panels: usize, max_features: usize) -> Self {
        let d = rng.random_range(1..=max_features.max(1));
        let k = rng.random_range(1..=max_panels.clamp(1, d));
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(rng);
        let mut owners: Vec<Option<usize>> = vec![None; d];
        for (j, &f) in order.iter().enumerate() {
            owners[f] = if j < k {
                Some(j)
            } else if rng.random_bool(0.25) {
                None
            } else {
                Some(rng.random_range(0..k))
            };
        }
        let panels: Vec<Panel> = (0..k)
            .map(|j| Panel {
                name: format!("K{j}"),
                cost: rng.random_range(1.0..100.0),
                features: (0..d).filter(|&f| owners[f] == Some(j)).collect(),
            })
            .collect();
        let visible = (0..d).filter(|&f| owners[f].is_none()).collect();
        let names = (0..d).map(|i| format!("f{i}")).collect();
        let scheme = PanelScheme::new(names, panels, visible).expect("generated scheme is valid");
        // Mean panel cost as the shaping unit keeps the rho grid comparable
        // across instances whose costs span two orders of magnitude.
        let cost_unit = scheme.panels().iter().map(|p| p.cost).sum::<f64>() / scheme.panels().len() as f64;

        let mut combos: Vec<(u64, bool)> = (0..1u64 << d).flat_map(|v| [(v, false), (v, true)]).collect();
        combos.shuffle(rng);
        let m = rng.random_range(2..=MAX_PROFILES.min(combos.len()));
        let mut chosen: Vec<(u64, bool)> = combos[..m].to_vec();
        if chosen.iter().all(|c| c.1) || chosen.iter().all(|c| !c.1) {
            let flip = !chosen[0].1;
            let pick = combos.iter().find(|c| c.1 == flip).copied().expect("both labels exist");
            chosen[0] = pick;
        }
        let weights: Vec<f64> = chosen.iter().map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let profiles = chosen
            .iter()
            .zip(&weights)
            .map(|(&(v, pos), &w)| Profile {
                values: (0..d).map(|i| v >> i & 1 == 1).collect(),
                label: Label::from_bool(pos),
                prob: w / total,
            })
            .collect();
        Self {
            name: "random".into(),
            scheme,
            profiles,
            cost_unit,
            state_bound: DEFAULT_STATE_BOUND,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.scheme.d();
        if d > 63 || self.scheme.num_panels() > 31 {
            return Err(Error::Size(format!("instance too wide: d = {d}")));
        }
        if self.profiles.is_empty() || self.profiles.len() > MAX_PROFILES {
            return Err(Error::Spec(format!("instance needs 1..={MAX_PROFILES} profiles, got {}", self.profiles.len())));
        }
        if let Some(p) = self.profiles.iter().find(|p| p.values.len() != d || !(p.prob >= 0.0)) {
            return Err(Error::Spec(format!("malformed profile {p:?}")));
        }
        let total: f64 = self.profiles.iter().map(|p| p.prob).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Spec(format!("profile probabilities sum to {total}")));
        }
        if !(self.cost_unit > 0.0) {
            return Err(Error::Spec("cost unit must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("instance serializes").as_bytes())
    }

    pub fn positive_mass(&self) -> f64 {
        self.profiles.iter().filter(|p| p.label.is_positive()).map(|p| p.prob).sum()
    }

    /// Negative-to-positive mass ratio.
    pub fn class_ratio(&self) -> f64 {
        let pos = self.positive_mass();
        (1.0 - pos) / pos
    }

    pub fn state_space(&self) -> Result<StateSpace> {
        StateSpace::build(self)
    }

    /// `TN + lambda TP + rho Cost / cost_unit`.
    pub fn shaped_objective(&self, t: &FrontierPoint, s: ShapingParams) -> f64 {
        t.tn + s.lambda * t.tp + s.rho * t.cost / self.cost_unit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObsState {
    pub panel_mask: u32,
    /// Bit `i` holds feature `i` when observed, 0 otherwise.
    pub values: u64,
}

#[derive(Debug, Clone)]
pub struct StateSpace {
    pub states: Vec<ObsState>,
    index: HashMap<ObsState, usize>,
    /// Profiles consistent with each state.
    pub members: Vec<Vec<usize>>,
    /// `children[s][k]`: states reached by buying panel `k` (empty when owned).
    pub children: Vec<Vec<Vec<usize>>>,
    /// Initial state of every profile.
    pub initial: Vec<usize>,
    pub n_panels: usize,
    masks: Vec<u64>,
    outcome: Vec<[FrontierPoint; 2]>,
}

fn feature_bits(scheme: &PanelScheme, panel_mask: u32) -> u64 {
    let mut bits = scheme.visible().iter().fold(0u64, |b, &i| b | 1 << i);
    for (k, p) in scheme.panels().iter().enumerate() {
        if panel_mask >> k & 1 == 1 {
            bits = p.features.iter().fold(bits, |b, &i| b | 1 << i);
        }
    }
    bits
}

fn profile_bits(p: &Profile) -> u64 {
    p.values.iter().enumerate().fold(0u64, |b, (i, &v)| if v { b | 1 << i } else { b })
}

impl StateSpace {
    fn build(inst: &TabularInstance) -> Result<Self> {
        inst.validate()?;
        let k = inst.scheme.num_panels();
        let masks: Vec<u64> = (0..1u32 << k).map(|m| feature_bits(&inst.scheme, m)).collect();
        let bits: Vec<u64> = inst.profiles.iter().map(profile_bits).collect();
        let mut keys = BTreeSet::new();
        for m in 0..1u32 << k {
            for &b in &bits {
                keys.insert((m.count_ones(), ObsState {
                    panel_mask: m,
                    values: b & masks[m as usize],
                }));
                if keys.len() > inst.state_bound {
                    return Err(Error::Size(format!("state space exceeds bound {}", inst.state_bound)));
                }
            }
        }
        let states: Vec<ObsState> = keys.into_iter().map(|(_, s)| s).collect();
        let index: HashMap<ObsState, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut members = vec![Vec::new(); states.len()];
        let mut outcome = vec![[FrontierPoint::default(); 2]; states.len()];
        for (pi, &b) in bits.iter().enumerate() {
            for m in 0..1u32 << k {
                let s = index[&ObsState {
                    panel_mask: m,
                    values: b & masks[m as usize],
                }];
                members[s].push(pi);
                let p = &inst.profiles[pi];
                // [diagnose P, diagnose N]
                if p.label.is_positive() {
                    outcome[s][0].tp += p.prob;
                    outcome[s][1].fn_ += p.prob;
                } else {
                    outcome[s][0].fp += p.prob;
                    outcome[s][1].tn += p.prob;
                }
            }
        }
        let children = states
            .iter()
            .enumerate()
            .map(|(si, st)| {
                (0..k)
                    .map(|j| {
                        if st.panel_mask >> j & 1 == 1 {
                            return Vec::new();
                        }
                        let nm = st.panel_mask | 1 << j;
                        let set: BTreeSet<usize> = members[si]
                            .iter()
                            .map(|&pi| {
                                index[&ObsState {
                                    panel_mask: nm,
                                    values: bits[pi] & masks[nm as usize],
                                }]
                            })
                            .collect();
                        set.into_iter().collect()
                    })
                    .collect()
            })
            .collect();
        let initial = bits
            .iter()
            .map(|&b| {
                index[&ObsState {
                    panel_mask: 0,
                    values: b & masks[0],
                }]
            })
            .collect();
        Ok(Self {
            states,
            index,
            members,
            children,
            initial,
            n_panels: k,
            masks,
            outcome,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn lookup(&self, s: ObsState) -> Option<usize> {
        self.index.get(&s).copied()
    }

    /// Distinct initial states, ascending.
    pub fn roots(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.initial.iter().copied().collect();
        set.into_iter().collect()
    }

    pub fn valid_actions(&self, s: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.n_panels).filter(|&k| self.states[s].panel_mask >> k & 1 == 0).collect();
        v.push(self.n_panels);
        v.push(self.n_panels + 1);
        v
    }

    fn is_valid(&self, s: usize, a: usize) -> bool {
        a == self.n_panels || a == self.n_panels + 1 || (a < self.n_panels && self.states[s].panel_mask >> a & 1 == 0)
    }

    fn mass(&self, inst: &TabularInstance, s: usize) -> f64 {
        self.members[s].iter().map(|&p| inst.profiles[p].prob).sum()
    }

    /// Next state of profile `pi` after buying panel `k` in state `s`.
    fn next(&self, inst: &TabularInstance, s: usize, k: usize, pi: usize) -> usize {
        let nm = self.states[s].panel_mask | 1 << k;
        self.index[&ObsState {
            panel_mask: nm,
            values: profile_bits(&inst.profiles[pi]) & self.masks[nm as usize],
        }]
    }
}

/// Deterministic policy; `None` on states it never reaches.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub actions: Vec<Option<usize>>,
}

impl TabularPolicy {
    /// Uniformly random valid action in every state.
    pub fn random<R: Rng + ?Sized>(space: &StateSpace, rng: &mut R) -> Self {
        Self {
            actions: (0..space.len())
                .map(|s| {
                    let v = space.valid_actions(s);
                    Some(v[rng.random_range(0..v.len())])
                })
                .collect(),
        }
    }

    pub fn constant(space: &StateSpace, label: Label) -> Self {
        let a = match label {
            Label::P => space.n_panels,
            Label::N => space.n_panels + 1,
        };
        Self {
            actions: vec![Some(a); space.len()],
        }
    }
}

/// Exact joint-mass tally of a policy.
pub fn exact_outcome(inst: &TabularInstance, space: &StateSpace, policy: &TabularPolicy) -> Result<FrontierPoint> {
    let mut out = FrontierPoint::default();
    for (pi, p) in inst.profiles.iter().enumerate() {
        let mut s = space.initial[pi];
        loop {
            let a = policy.actions[s].ok_or_else(|| contract(format!("policy undefined on reached state {s}")))?;
            if !space.is_valid(s, a) {
                return Err(Error::InvalidAction(format!("action {a} in state {s}")));
            }
            if a < space.n_panels {
                out.cost += p.prob * inst.scheme.panel(a).cost;
                s = space.next(inst, s, a, pi);
                continue;
            }
            match (a == space.n_panels, p.label) {
                (true, Label::P) => out.tp += p.prob,
                (true, Label::N) => out.fp += p.prob,
                (false, Label::P) => out.fn_ += p.prob,
                (false, Label::N) => out.tn += p.prob,
            }
            break;
        }
    }
    Ok(out)
}

pub fn exact_tally(inst: &TabularInstance, space: &StateSpace, policy: &TabularPolicy) -> Result<ConfusionTally> {
    Ok(exact_outcome(inst, space, policy)?.tally())
}

/// Number of behaviour-distinct deterministic policies (saturating).
pub fn count_policies(space: &StateSpace) -> f64 {
    let mut memo = vec![f64::NAN; space.len()];
    for s in (0..space.len()).rev() {
        let mut c = 2.0;
        for kids in &space.children[s] {
            if !kids.is_empty() {
                c += kids.iter().map(|&k| memo[k]).product::<f64>();
            }
        }
        memo[s] = c;
    }
    space.roots().iter().map(|&r| memo[r]).product()
}

/// Visits every deterministic policy once, up to behaviour on unreached
/// states, with its exact outcome. Returns the number visited.
pub fn enumerate_policies<F>(inst: &TabularInstance, max_policies: usize, mut visit: F) -> Result<usize>
where
    F: FnMut(&TabularPolicy, &FrontierPoint),
{
    let space = inst.state_space()?;
    let n = count_policies(&space);
    if n > max_policies as f64 {
        return Err(Error::Size(format!("{n} policies exceed the enumeration bound {max_policies}")));
    }
    let mut policy = TabularPolicy {
        actions: vec![None; space.len()],
    };
    let pending: BTreeSet<usize> = space.roots().into_iter().collect();
    let mut count = 0usize;
    recurse(inst, &space, &mut policy, pending, &mut |p| {
        let out = exact_outcome(inst, &space, p).expect("enumerated policy is complete");
        visit(p, &out);
        count += 1;
    });
    Ok(count)
}

fn recurse(
    inst: &TabularInstance,
    space: &StateSpace,
    policy: &mut TabularPolicy,
    mut pending: BTreeSet<usize>,
    leaf: &mut dyn FnMut(&TabularPolicy),
) {
    let Some(s) = pending.pop_first() else {
        leaf(policy);
        return;
    };
    for a in space.valid_actions(s) {
        policy.actions[s] = Some(a);
        let mut next = pending.clone();
        if a < space.n_panels {
            next.extend(space.children[s][a].iter().copied());
        }
        recurse(inst, space, policy, next, leaf);
    }
    policy.actions[s] = None;
}

/// Collects every enumerated policy with its outcome.
pub fn enumerate_all(inst: &TabularInstance, max_policies: usize) -> Result<Vec<(TabularPolicy, FrontierPoint)>> {
    let mut out = Vec::new();
    enumerate_policies(inst, max_policies, |p, o| out.push((p.clone(), *o)))?;
    Ok(out)
}

fn prune(mut pts: Vec<FrontierPoint>) -> Vec<FrontierPoint> {
    pts.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(b.tp.total_cmp(&a.tp)).then(b.tn.total_cmp(&a.tn)));
    let mut keep: Vec<FrontierPoint> = Vec::with_capacity(pts.len());
    for p in pts {
        if !keep.iter().any(|q| q.dominates(&p)) {
            keep.push(p);
        }
    }
    keep
}

/// Outcomes not dominated in (TP up, TN up, cost down) by another policy's
/// outcome. Every monotone objective in (TP, TN, -cost), including F1, AM
/// and the shaped objective, attains its constrained maxima on this set.
pub fn pareto_frontier(inst: &TabularInstance) -> Result<Vec<FrontierPoint>> {
    let space = inst.state_space()?;
    let mut memo: Vec<Vec<FrontierPoint>> = vec![Vec::new(); space.len()];
    for s in (0..space.len()).rev() {
        let mut opts = vec![space.outcome[s][0], space.outcome[s][1]];
        let mass = space.mass(inst, s);
        for (k, kids) in space.children[s].iter().enumerate() {
            if kids.is_empty() {
                continue;
            }
            let mut acc = vec![FrontierPoint {
                cost: mass * inst.scheme.panel(k).cost,
                ..Default::default()
            }];
            for &c in kids {
                let mut next = Vec::with_capacity(acc.len() * memo[c].len());
                for a in &acc {
                    for b in &memo[c] {
                        next.push(a.add(*b));
                    }
                }
                acc = prune(next);
            }
            opts.extend(acc);
        }
        memo[s] = prune(opts);
    }
    let mut acc = vec![FrontierPoint::default()];
    for r in space.roots() {
        let mut next = Vec::new();
        for a in &acc {
            for b in &memo[r] {
                next.push(a.add(*b));
            }
        }
        acc = prune(next);
    }
    Ok(acc)
}

/// Backward induction on the shaped reward. Ties prefer diagnosing (P before
/// N) over purchases, then the lowest panel index. Returns the policy and the
/// optimal expected shaped return.
pub fn dp_solve_shaped(inst: &TabularInstance, shaping: ShapingParams) -> Result<(TabularPolicy, f64)> {
    shaping.validate()?;
    let space = inst.state_space()?;
    let mut value = vec![0.0; space.len()];
    let mut actions = vec![None; space.len()];
    for s in (0..space.len()).rev() {
        let [p, n] = space.outcome[s];
        let mut best = (shaping.lambda * p.tp, space.n_panels);
        if n.tn > best.0 + TIE_TOL {
            best = (n.tn, space.n_panels + 1);
        }
        let mass = space.mass(inst, s);
        for (k, kids) in space.children[s].iter().enumerate() {
            if kids.is_empty() {
                continue;
            }
            let v = shaping.rho * mass * inst.scheme.panel(k).cost / inst.cost_unit + kids.iter().map(|&c| value[c]).sum::<f64>();
            if v > best.0 + TIE_TOL {
                best = (v, k);
            }
        }
        value[s] = best.0;
        actions[s] = Some(best.1);
    }
    let total = space.roots().iter().map(|&r| value[r]).sum();
    Ok((TabularPolicy { actions }, total))
}

/// Max F1 among enumerated policies with cost at most each budget.
pub fn brute_force_front(inst: &TabularInstance, budgets: &[f64], max_policies: usize) -> Result<Vec<f64>> {
    let mut best = vec![f64::NEG_INFINITY; budgets.len()];
    enumerate_policies(inst, max_policies, |_, o| {
        let f = o.f1();
        for (b, v) in budgets.iter().zip(best.iter_mut()) {
            if cost_le(o.cost, *b) && f > *v {
                *v = f;
            }
        }
    })?;
    Ok(best)
}

/// Same front computed from the frontier.
pub fn frontier_front(frontier: &[FrontierPoint], budgets: &[f64]) -> Vec<f64> {
    budgets
        .iter()
        .map(|&b| {
            frontier
                .iter()
                .filter(|p| cost_le(p.cost, b))
                .map(|p| p.f1())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Cost budget with an optional floor on TP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetQuery {
    pub budget: f64,
    pub tp_floor: Option<f64>,
}

impl BudgetQuery {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget >= 0.0) {
            return Err(Error::Spec(format!("budget must be >= 0, got {}", self.budget)));
        }
        if let Some(k) = self.tp_floor {
            if !(0.0..=1.0).contains(&k) {
                return Err(Error::Spec(format!("TP floor must lie in [0, 1], got {k}")));
            }
        }
        Ok(())
    }

    /// Best-F1 deterministic outcome meeting the constraints, if any.
    pub fn solve(&self, frontier: &[FrontierPoint]) -> Result<Option<FrontierPoint>> {
        self.validate()?;
        Ok(frontier
            .iter()
            .filter(|p| cost_le(p.cost, self.budget) && self.tp_floor.is_none_or(|k| p.tp >= k - TIE_TOL))
            .max_by(|a, b| a.f1().total_cmp(&b.f1()))
            .copied())
    }
}

/// Occupancy of one (profile, panel mask) state under an action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyEntry {
    pub profile: usize,
    pub panel_mask: u32,
    pub action: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyTable {
    pub entries: Vec<OccupancyEntry>,
    /// Initial mass per (profile, empty mask) state.
    pub initial: Vec<(usize, f64)>,
    pub n_panels: usize,
    labels: Vec<Label>,
}

/// Expected visit counts per state-action pair, by forward propagation over
/// full states `(profile, panel mask)`.
pub fn occupancy_of(inst: &TabularInstance, policy: &TabularPolicy) -> Result<OccupancyTable> {
    let space = inst.state_space()?;
    let mut entries = Vec::new();
    for (pi, p) in inst.profiles.iter().enumerate() {
        let mut s = space.initial[pi];
        loop {
            let a = policy.actions[s].ok_or_else(|| contract(format!("policy undefined on reached state {s}")))?;
            if !space.is_valid(s, a) {
                return Err(Error::InvalidAction(format!("action {a} in state {s}")));
            }
            entries.push(OccupancyEntry {
                profile: pi,
                panel_mask: space.states[s].panel_mask,
                action: a,
                mass: p.prob,
            });
            if a >= space.n_panels {
                break;
            }
            s = space.next(inst, s, a, pi);
        }
    }
    Ok(OccupancyTable {
        entries,
        initial: inst.profiles.iter().enumerate().map(|(i, p)| (i, p.prob)).collect(),
        n_panels: space.n_panels,
        labels: inst.profiles.iter().map(|p| p.label).collect(),
    })
}

/// Compensated (Neumaier) summation.
fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

impl OccupancyTable {
    fn diag(&self, predict: Label, truth: Label) -> f64 {
        let a = match predict {
            Label::P => self.n_panels,
            Label::N => self.n_panels + 1,
        };
        exact_sum(
            self.entries
                .iter()
                .filter(|e| e.action == a && self.labels[e.profile] == truth)
                .map(|e| e.mass),
        )
    }

    pub fn tp(&self) -> f64 {
        self.diag(Label::P, Label::P)
    }

    pub fn tn(&self) -> f64 {
        self.diag(Label::N, Label::N)
    }

    pub fn fp(&self) -> f64 {
        self.diag(Label::P, Label::N)
    }

    pub fn fn_(&self) -> f64 {
        self.diag(Label::N, Label::P)
    }

    /// `sum_k c(k) sum_s mu(s, k)`.
    pub fn cost(&self, scheme: &PanelScheme) -> f64 {
        (0..self.n_panels)
            .map(|k| scheme.panel(k).cost * exact_sum(self.entries.iter().filter(|e| e.action == k).map(|e| e.mass)))
            .sum()
    }

    /// Largest `|sum_a mu(s, a) - inflow(s) - xi(s)|` over full states.
    pub fn flow_residual(&self) -> f64 {
        let mut out: HashMap<(usize, u32), f64> = HashMap::new();
        let mut inflow: HashMap<(usize, u32), f64> = HashMap::new();
        for e in &self.entries {
            *out.entry((e.profile, e.panel_mask)).or_default() += e.mass;
            if e.action < self.n_panels {
                *inflow.entry((e.profile, e.panel_mask | 1 << e.action)).or_default() += e.mass;
            }
        }
        for &(p, m) in &self.initial {
            *inflow.entry((p, 0)).or_default() += m;
        }
        let keys: BTreeSet<(usize, u32)> = out.keys().chain(inflow.keys()).copied().collect();
        keys.iter()
            .map(|k| (out.get(k).copied().unwrap_or(0.0) - inflow.get(k).copied().unwrap_or(0.0)).abs())
            .fold(0.0, f64::max)
    }
}

/// Runs a tabular policy inside the environment on observed values.
pub struct TabularAgent {
    space: Arc<StateSpace>,
    policy: TabularPolicy,
    scheme: PanelScheme,
}

impl TabularAgent {
    pub fn new(inst: &TabularInstance, policy: TabularPolicy) -> Result<Self> {
        Ok(Self {
            space: Arc::new(inst.state_space()?),
            policy,
            scheme: inst.scheme.clone(),
        })
    }
}

impl DiagnosisPolicy for TabularAgent {
    fn decide(&mut self, obs: &Observation) -> Result<Action> {
        let panel_mask = (0..self.scheme.num_panels())
            .filter(|&k| obs.mask.panel_observed(&self.scheme, k))
            .fold(0u32, |m, k| m | 1 << k);
        let values = obs
            .masked_features
            .iter()
            .zip(&obs.mask.bits)
            .enumerate()
            .fold(0u64, |b, (i, (&v, &m))| if m && v > 0.5 { b | 1 << i } else { b });
        let s = self
            .space
            .lookup(ObsState { panel_mask, values })
            .ok_or_else(|| contract("observation outside the instance's state space"))?;
        let a = self.policy.actions[s].ok_or_else(|| contract(format!("policy undefined on state {s}")))?;
        Action::from_index(a, self.space.n_panels)
    }
}

/// Samples `episodes` patients and plays the policy in the environment.
pub fn simulate(inst: &TabularInstance, policy: &TabularPolicy, episodes: usize, seed: u64) -> Result<ConfusionTally> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cdf: Vec<f64> = inst
        .profiles
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.prob;
            Some(*acc)
        })
        .collect();
    let records: Vec<PatientRecord> = (0..episodes)
        .map(|i| {
            let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
            let pi = cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1);
            let p = &inst.profiles[pi];
            PatientRecord::complete(format!("s{i}"), p.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(), p.label)
        })
        .collect();
    let cfg = EnvConfig::new(inst.scheme.clone(), ShapingParams::new(1.0, 0.0)?, ResetMode::Eval);
    let mut agent = TabularAgent::new(inst, policy.clone())?;
    let report = evaluate_policy(&mut agent, Arc::new(records), &cfg, trivial_embedder(inst.scheme.d())?)?;
    Ok(report.tally)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentReport {
    pub instance: String,
    pub instance_hash: String,
    pub n_shaping: usize,
    pub n_budgets: usize,
    pub violations: usize,
    /// Smallest `shaped(pi*) - shaped_linear(pi)` slack seen; negative beyond
    /// tolerance means a violation.
    pub worst_dominance_margin: f64,
    /// Largest F1 shortfall of shaped solutions (with same-lambda mixtures)
    /// against the deterministic front.
    pub eps_grid: f64,
    /// Same shortfall using deterministic shaped solutions only.
    pub eps_deterministic: f64,
    pub worst_budget: f64,
}

/// Outcome and cost of every shaped solution on the grid.
fn shaped_solutions(inst: &TabularInstance, space: &StateSpace, grid: &[ShapingParams]) -> Result<Vec<(ShapingParams, FrontierPoint)>> {
    grid.iter()
        .map(|&s| {
            let (pol, _) = dp_solve_shaped(inst, s)?;
            Ok((s, exact_outcome(inst, space, &pol)?))
        })
        .collect()
}

/// Best F1 under budget `b` over pairs mixed at the episode level.
fn best_mixture_f1(sols: &[&FrontierPoint], b: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for (i, p) in sols.iter().enumerate() {
        if cost_le(p.cost, b) {
            best = best.max(p.f1());
        }
        for q in &sols[i + 1..] {
            let (lo, hi) = if p.cost <= q.cost { (p, q) } else { (q, p) };
            if !cost_le(lo.cost, b) || cost_le(hi.cost, b) {
                continue;
            }
            // Weight on `hi` that spends the budget exactly; F1 is monotone
            // along the segment so the endpoints decide.
            let th = (b - lo.cost) / (hi.cost - lo.cost);
            let mix = FrontierPoint {
                tp: (1.0 - th) * lo.tp + th * hi.tp,
                tn: (1.0 - th) * lo.tn + th * hi.tn,
                fp: (1.0 - th) * lo.fp + th * hi.fp,
                fn_: (1.0 - th) * lo.fn_ + th * hi.fn_,
                cost: b,
            };
            best = best.max(mix.f1());
        }
    }
    best
}

/// Checks the exact dominance property of every shaped solution and measures
/// how far the shaped solutions fall short of the deterministic F1 front.
/// `budgets == None` uses every achievable frontier cost.
pub fn verify_containment(inst: &TabularInstance, grid: &SweepGrid, budgets: Option<&[f64]>) -> Result<ContainmentReport> {
    grid.validate()?;
    let space = inst.state_space()?;
    let frontier = pareto_frontier(inst)?;
    let sols = shaped_solutions(inst, &space, &grid.pairs)?;
    let mut violations = 0;
    let mut worst_margin = f64::INFINITY;
    for (s, star) in &sols {
        let lin_star = star.tn + s.lambda * star.tp;
        for f in frontier.iter().filter(|f| cost_le(f.cost, star.cost)) {
            let margin = lin_star - (f.tn + s.lambda * f.tp);
            worst_margin = worst_margin.min(margin);
            if margin < -DOMINANCE_TOL {
                violations += 1;
            }
        }
    }
    let budget_list: Vec<f64> = match budgets {
        Some(b) => b.to_vec(),
        None => {
            let mut c: Vec<f64> = frontier.iter().map(|f| f.cost).collect();
            c.sort_by(f64::total_cmp);
            c.dedup();
            c
        }
    };
    let front = frontier_front(&frontier, &budget_list);
    let mut by_lambda: HashMap<u64, Vec<&FrontierPoint>> = HashMap::new();
    for (s, o) in &sols {
        by_lambda.entry(s.lambda.to_bits()).or_default().push(o);
    }
    let all: Vec<&FrontierPoint> = sols.iter().map(|(_, o)| o).collect();
    let (mut eps, mut eps_det, mut worst_b) = (0.0f64, 0.0f64, 0.0);
    for (&b, &target) in budget_list.iter().zip(&front) {
        if !target.is_finite() {
            continue;
        }
        let det = all
            .iter()
            .filter(|o| cost_le(o.cost, b))
            .map(|o| o.f1())
            .fold(f64::NEG_INFINITY, f64::max);
        let mix = by_lambda
            .values()
            .map(|v| best_mixture_f1(v, b))
            .fold(det, f64::max);
        let gap = (target - mix).max(0.0);
        if gap > eps {
            eps = gap;
            worst_b = b;
        }
        eps_det = eps_det.max((target - det).max(0.0));
    }
    Ok(ContainmentReport {
        instance: inst.name.clone(),
        instance_hash: inst.hash(),
        n_shaping: grid.len(),
        n_budgets: budget_list.len(),
        violations,
        worst_dominance_margin: if worst_margin.is_finite() { worst_margin } else { 0.0 },
        eps_grid: eps,
        eps_deterministic: eps_det,
        worst_budget: worst_b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmReport {
    pub instance: String,
    pub instance_hash: String,
    pub class_ratio: f64,
    pub n_rho: usize,
    pub violations: usize,
    pub worst_margin: f64,
    /// Largest `|envelope(C) - brute_force(C)|` over realized costs `C`.
    pub max_envelope_gap: f64,
}

/// With lambda fixed to the class ratio, every shaped solution must have the
/// best AM among policies of lower or equal cost, and the swept envelope must
/// equal the brute-force AM front at the realized costs.
pub fn verify_am_front(inst: &TabularInstance, rhos: &[f64]) -> Result<AmReport> {
    let ratio = inst.class_ratio();
    if !ratio.is_finite() || !(ratio > 0.0) {
        return Err(contract("AM certification needs both classes"));
    }
    let mut rho_list = vec![0.0];
    rho_list.extend(rhos.iter().copied().filter(|&r| r != 0.0));
    let grid: Vec<ShapingParams> = rho_list.iter().map(|&rho| ShapingParams { lambda: ratio, rho }).collect();
    let space = inst.state_space()?;
    let frontier = pareto_frontier(inst)?;
    let sols = shaped_solutions(inst, &space, &grid)?;
    let am = |p: &FrontierPoint| am_linear(p.tp, p.tn, ratio);
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    let mut gap = 0.0f64;
    for (_, star) in &sols {
        let a_star = am(star);
        let brute = frontier.iter().filter(|f| cost_le(f.cost, star.cost)).map(am).fold(f64::NEG_INFINITY, f64::max);
        for f in frontier.iter().filter(|f| cost_le(f.cost, star.cost)) {
            let m = a_star - am(f);
            worst = worst.min(m);
            if m < -DOMINANCE_TOL {
                violations += 1;
            }
        }
        let envelope = sols
            .iter()
            .filter(|(_, o)| cost_le(o.cost, star.cost))
            .map(|(_, o)| am(o))
            .fold(f64::NEG_INFINITY, f64::max);
        gap = gap.max((envelope - brute).abs());
        if (envelope - brute).abs() > DOMINANCE_TOL {
            violations += 1;
        }
    }
    Ok(AmReport {
        instance: inst.name.clone(),
        instance_hash: inst.hash(),
        class_ratio: ratio,
        n_rho: grid.len(),
        violations,
        worst_margin: if worst.is_finite() { worst } else { 0.0 },
        max_envelope_gap: gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub seed: u64,
    pub n_lambda_rho: usize,
    pub n_rho: usize,
    pub containment: Vec<ContainmentReport>,
    pub am: Vec<AmReport>,
    pub total_violations: usize,
    pub max_eps_grid: f64,
    pub max_eps_deterministic: f64,
}

impl Certificate {
    pub fn passed(&self, eps_limit: f64) -> bool {
        self.total_violations == 0 && self.max_eps_grid <= eps_limit
    }
}

/// The reference instance followed by `n_random` random instances with at
/// most 3 panels and 4 features, each drawn from its own derived seed.
pub fn certification_instances(n_random: usize, seed: u64) -> Vec<TabularInstance> {
    let mut instances = vec![TabularInstance::reference()];
    for i in 0..n_random {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "oracle-instance", i as u64));
        let mut inst = TabularInstance::random(&mut rng, 3, 4);
        inst.name = format!("random-{i}");
        instances.push(inst);
    }
    instances
}

/// Certifies [`certification_instances`] on `grid` and its rho values.
pub fn certify(n_random: usize, seed: u64, grid: &SweepGrid, jobs: usize) -> Result<Certificate> {
    let instances = certification_instances(n_random, seed);
    let rhos: Vec<f64> = {
        let set: BTreeSet<u64> = grid.pairs.iter().map(|p| p.rho.to_bits()).collect();
        let mut v: Vec<f64> = set.into_iter().map(f64::from_bits).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    };
    let run = |inst: &TabularInstance| -> Result<(ContainmentReport, AmReport)> {
        Ok((verify_containment(inst, grid, None)?, verify_am_front(inst, &rhos)?))
    };
    let results: Vec<Result<(ContainmentReport, AmReport)>> = if jobs <= 1 {
        instances.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| contract(e.to_string()))?;
        pool.install(|| instances.par_iter().map(run).collect())
    };
    let mut containment = Vec::new();
    let mut am = Vec::new();
    for r in results {
        let (c, a) = r?;
        containment.push(c);
        am.push(a);
    }
    let total_violations = containment.iter().map(|c| c.violations).sum::<usize>() + am.iter().map(|a| a.violations).sum::<usize>();
    let max_eps_grid = containment.iter().map(|c| c.eps_grid).fold(0.0, f64::max);
    let max_eps_deterministic = containment.iter().map(|c| c.eps_deterministic).fold(0.0, f64::max);
    Ok(Certificate {
        seed,
        n_lambda_rho: grid.len(),
        n_rho: rhos.len() + 1,
        containment,
        am,
        total_violations,
        max_eps_grid,
        max_eps_deterministic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    fn find(all: &[(TabularPolicy, FrontierPoint)], f: impl Fn(&FrontierPoint) -> bool) -> FrontierPoint {
        all.iter().map(|x| x.1).find(|o| f(o)).expect("policy present")
    }

    #[test]
    fn reference_enumeration_tallies() {
        let inst = TabularInstance::reference();
        let all = enumerate_all(&inst, 1000).unwrap();
        // Root: P, N, or buy and then one of 2 x 2 follow-ups.
        assert_eq!(all.len(), 6);
        let always_n = find(&all, |o| o.cost == 0.0 && o.tp == 0.0 && o.fp == 0.0);
        assert!(close(always_n.tn, 0.8) && always_n.f1() == 0.0);
        let always_p = find(&all, |o| o.cost == 0.0 && o.tn == 0.0 && o.fn_ == 0.0);
        assert!(close(always_p.tp, 0.2) && close(always_p.f1(), 1.0 / 3.0));
        let follow = find(&all, |o| o.cost > 0.0 && close(o.tp, 0.18) && close(o.tn, 0.72));
        assert!(close(follow.fp, 0.08) && close(follow.fn_, 0.02) && close(follow.cost, 10.0));
        assert!(close(follow.f1(), 18.0 / 23.0));
        for (_, o) in &all {
            assert!(close(o.tp + o.tn + o.fp + o.fn_, 1.0));
        }
    }

    #[test]
    fn zero_panel_instance_has_two_policies() {
        let scheme = PanelScheme::new(vec!["v".into()], vec![], vec![0]).unwrap();
        let inst = TabularInstance {
            name: "flat".into(),
            scheme,
            profiles: vec![
                Profile {
                    values: vec![true],
                    label: Label::P,
                    prob: 0.5,
                },
                Profile {
                    values: vec![true],
                    label: Label::N,
                    prob: 0.5,
                },
            ],
            cost_unit: 1.0,
            state_bound: DEFAULT_STATE_BOUND,
        };
        assert_eq!(enumerate_all(&inst, 100).unwrap().len(), 2);
    }

    #[test]
    fn dp_reference_cases() {
        let inst = TabularInstance::reference();
        let space = inst.state_space().unwrap();
        let (pol, v) = dp_solve_shaped(&inst, ShapingParams::new(1.0, 0.0).unwrap()).unwrap();
        assert!(close(v, 0.9));
        let o = exact_outcome(&inst, &space, &pol).unwrap();
        assert!(close(o.tp, 0.18) && close(o.tn, 0.72) && close(o.cost, 10.0));

        let (pol, v) = dp_solve_shaped(&inst, ShapingParams::new(0.0, 0.0).unwrap()).unwrap();
        assert!(close(v, 0.8));
        assert_eq!(exact_outcome(&inst, &space, &pol).unwrap().cost, 0.0);

        let (pol, _) = dp_solve_shaped(&inst, ShapingParams::new(1.0, -1e6).unwrap()).unwrap();
        let o = exact_outcome(&inst, &space, &pol).unwrap();
        assert_eq!(o.cost, 0.0);
        assert!(close(o.tn, 0.8));
    }

    #[test]
    fn dp_matches_enumeration_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let inst = TabularInstance::random(&mut rng, 3, 4);
            let s = ShapingParams::new(rng.random_range(0.0..10.0), -rng.random_range(0.0..3.0)).unwrap();
            let (_, v) = dp_solve_shaped(&inst, s).unwrap();
            let mut best = f64::NEG_INFINITY;
            match enumerate_policies(&inst, DEFAULT_POLICY_BOUND, |_, o| best = best.max(inst.shaped_objective(o, s))) {
                Ok(_) => assert!((v - best).abs() < 1e-9, "{v} vs {best}"),
                Err(Error::Size(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn frontier_agrees_with_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 15 {
            let inst = TabularInstance::random(&mut rng, 2, 3);
            let Ok(all) = enumerate_all(&inst, 200_000) else { continue };
            let frontier = pareto_frontier(&inst).unwrap();
            let mut costs: Vec<f64> = all.iter().map(|x| x.1.cost).collect();
            costs.sort_by(f64::total_cmp);
            costs.dedup();
            let a = brute_force_front(&inst, &costs, 200_000).unwrap();
            let b = frontier_front(&frontier, &costs);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
            // Every enumerated outcome is weakly dominated by a frontier point.
            for (_, o) in &all {
                assert!(frontier.iter().any(|f| f.tp >= o.tp - 1e-12 && f.tn >= o.tn - 1e-12 && f.cost <= o.cost + 1e-12));
            }
            checked += 1;
        }
    }

    #[test]
    fn budget_front_reference() {
        let inst = TabularInstance::reference();
        let f = brute_force_front(&inst, &[0.0, 5.0, 10.0], 1000).unwrap();
        assert!(close(f[0], 1.0 / 3.0) && close(f[1], 1.0 / 3.0) && close(f[2], 18.0 / 23.0));
        let frontier = pareto_frontier(&inst).unwrap();
        let q = BudgetQuery {
            budget: 10.0,
            tp_floor: Some(0.19),
        };
        let best = q.solve(&frontier).unwrap().unwrap();
        assert!(close(best.tp, 0.2));
        assert!(BudgetQuery { budget: -1.0, tp_floor: None }.validate().is_err());
    }

    #[test]
    fn front_is_monotone_in_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let inst = TabularInstance::random(&mut rng, 3, 4);
            let frontier = pareto_frontier(&inst).unwrap();
            let budgets: Vec<f64> = (0..50).map(|i| i as f64 * 5.0).collect();
            let f = frontier_front(&frontier, &budgets);
            assert!(f.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn occupancy_reference_and_flow() {
        let inst = TabularInstance::reference();
        let space = inst.state_space().unwrap();
        let (pol, _) = dp_solve_shaped(&inst, ShapingParams::new(1.0, 0.0).unwrap()).unwrap();
        let occ = occupancy_of(&inst, &pol).unwrap();
        assert_eq!(occ.cost(&inst.scheme), 10.0);
        assert!(close(occ.tp(), 0.18) && close(occ.tn(), 0.72));

        let occ = occupancy_of(&inst, &TabularPolicy::constant(&space, Label::P)).unwrap();
        assert!(occ.entries.iter().all(|e| e.panel_mask == 0 && e.action == 1));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let inst = TabularInstance::random(&mut rng, 3, 4);
            let space = inst.state_space().unwrap();
            let pol = TabularPolicy::random(&space, &mut rng);
            let occ = occupancy_of(&inst, &pol).unwrap();
            assert!(occ.flow_residual() < 1e-12);
            let o = exact_outcome(&inst, &space, &pol).unwrap();
            assert!((occ.tp() - o.tp).abs() < 1e-12 && (occ.tn() - o.tn).abs() < 1e-12);
            assert!((occ.cost(&inst.scheme) - o.cost).abs() < 1e-9);
        }
    }

    #[test]
    fn simulation_tracks_exact_tally() {
        let inst = TabularInstance::reference();
        let space = inst.state_space().unwrap();
        let (pol, _) = dp_solve_shaped(&inst, ShapingParams::new(1.0, 0.0).unwrap()).unwrap();
        let t = simulate(&inst, &pol, 20_000, 1).unwrap();
        let e = exact_tally(&inst, &space, &pol).unwrap();
        let sd = (e.tp * (1.0 - e.tp) / 20_000.0).sqrt();
        assert!((t.tp - e.tp).abs() < 4.0 * sd);
        assert!((t.mean_cost - 10.0).abs() < 1e-12);
    }

    #[test]
    fn reference_certificates() {
        let inst = TabularInstance::reference();
        let r = verify_containment(&inst, &SweepGrid::default(), None).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.eps_grid <= 0.01, "{r:?}");
        let a = verify_am_front(&inst, &SweepGrid::default_rhos()).unwrap();
        assert_eq!(a.violations, 0);
        assert!(close(a.class_ratio, 4.0));
        let (pol, _) = dp_solve_shaped(&inst, ShapingParams::new(4.0, 0.0).unwrap()).unwrap();
        let o = exact_outcome(&inst, &inst.state_space().unwrap(), &pol).unwrap();
        assert!(close(am_linear(o.tp, o.tn, 4.0), 0.9));
    }

    #[test]
    fn single_policy_instance_is_trivially_contained() {
        let scheme = PanelScheme::new(vec!["v".into()], vec![], vec![0]).unwrap();
        let inst = TabularInstance {
            name: "one".into(),
            scheme,
            profiles: vec![Profile {
                values: vec![false],
                label: Label::P,
                prob: 1.0,
            }],
            cost_unit: 1.0,
            state_bound: DEFAULT_STATE_BOUND,
        };
        let r = verify_containment(&inst, &SweepGrid::default(), None).unwrap();
        assert_eq!((r.violations, r.eps_grid), (0, 0.0));
    }

    #[test]
    fn state_bound_enforced() {
        let mut inst = TabularInstance::reference();
        inst.state_bound = 2;
        assert!(matches!(inst.state_space(), Err(Error::Size(_))));
    }
}

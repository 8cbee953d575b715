//! Confusion accounting and the F1 / AM / AUROC / cost metrics.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{Label, PatientRecord};
use crate::env::{Action, DiagnosisPolicy, Env, EnvConfig, ResetMode, StateEmbedder};
use crate::error::{contract, Error, Result};

/// Normalised confusion cells plus mean per-episode testing cost.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfusionTally {
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    /// Mean cost per episode, in currency units.
    pub mean_cost: f64,
    pub n_episodes: u64,
}

impl ConfusionTally {
    pub fn new(tp: f64, tn: f64, fp: f64, fn_: f64, mean_cost: f64) -> Self {
        Self {
            tp,
            tn,
            fp,
            fn_,
            mean_cost,
            n_episodes: 0,
        }
    }

    pub fn positive_fraction(&self) -> f64 {
        self.tp + self.fn_
    }

    pub fn f1(&self) -> f64 {
        f1_score(self)
    }
}

/// Raw counts; merges associatively across evaluation shards.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TallyAccumulator {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub cost_sum: f64,
}

impl TallyAccumulator {
    pub fn record(&mut self, predicted: Label, truth: Label, cost: f64) {
        match (predicted, truth) {
            (Label::P, Label::P) => self.tp += 1,
            (Label::N, Label::N) => self.tn += 1,
            (Label::P, Label::N) => self.fp += 1,
            (Label::N, Label::P) => self.fn_ += 1,
        }
        self.cost_sum += cost;
    }

    pub fn merge(&mut self, other: &TallyAccumulator) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.cost_sum += other.cost_sum;
    }

    pub fn episodes(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn finish(&self) -> ConfusionTally {
        let n = self.episodes();
        if n == 0 {
            return ConfusionTally::default();
        }
        let nf = n as f64;
        ConfusionTally {
            tp: self.tp as f64 / nf,
            tn: self.tn as f64 / nf,
            fp: self.fp as f64 / nf,
            fn_: self.fn_ as f64 / nf,
            mean_cost: self.cost_sum / nf,
            n_episodes: n,
        }
    }
}

/// `2 TP / (1 + TP - TN)`; 0 when there are no true positives.
pub fn f1_score(t: &ConfusionTally) -> f64 {
    if t.tp <= 0.0 {
        return 0.0;
    }
    let denom = 1.0 + t.tp - t.tn;
    if denom <= 0.0 {
        return 0.0;
    }
    (2.0 * t.tp / denom).clamp(0.0, 1.0)
}

/// Mean of true-positive and true-negative rates. `class_ratio` is the
/// negative:positive ratio, which fixes `tp + fn = 1 / (1 + ratio)`.
pub fn am_score(t: &ConfusionTally, class_ratio: f64) -> Result<f64> {
    if !(class_ratio > 0.0) || !class_ratio.is_finite() {
        return Err(contract(format!("class ratio must be positive, got {class_ratio}")));
    }
    let pos = 1.0 / (1.0 + class_ratio);
    if (t.tp + t.fn_ - pos).abs() > 1e-9 {
        return Err(contract(format!(
            "tally positive mass {} inconsistent with class ratio {class_ratio}",
            t.tp + t.fn_
        )));
    }
    Ok(am_linear(t.tp, t.tn, class_ratio))
}

/// The linear form `(1 + r) / (2 r) * (r TP + TN)` of the AM score.
pub fn am_linear(tp: f64, tn: f64, class_ratio: f64) -> f64 {
    (1.0 + class_ratio) / (2.0 * class_ratio) * (class_ratio * tp + tn)
}

/// Rate-average form of AM, defined for any tally with both classes present.
pub fn am_from_rates(t: &ConfusionTally) -> f64 {
    let tpr = t.tp / (t.tp + t.fn_);
    let tnr = t.tn / (t.tn + t.fp);
    0.5 * (tpr + tnr)
}

/// Area under the ROC curve via the Mann-Whitney statistic; ties count 1/2.
pub fn auroc(scores: &[(f64, Label)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|s| s.1.is_positive()).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(contract("AUROC scores contain NaN"));
    }
    let mut sorted: Vec<(f64, Label)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    // Average ranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg_rank * sorted[i..=j].iter().filter(|s| s.1.is_positive()).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * nn))
}

/// Outcome of running a policy once per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tally: ConfusionTally,
    /// AUROC of the classifier's positive probability at the diagnosis state;
    /// `None` when the records hold a single class.
    pub auroc: Option<f64>,
    /// Fraction of episodes in which each panel was purchased.
    pub panel_rates: Vec<f64>,
}

impl EvalReport {
    pub fn f1(&self) -> f64 {
        f1_score(&self.tally)
    }

    pub fn am(&self) -> f64 {
        am_from_rates(&self.tally)
    }
}

/// Runs one evaluation episode per record (demographics-only start, records
/// in order) and accumulates the confusion tally and mean cost.
pub fn evaluate_policy(
    policy: &mut dyn DiagnosisPolicy,
    records: Arc<Vec<PatientRecord>>,
    env_cfg: &EnvConfig,
    embedder: StateEmbedder,
) -> Result<EvalReport> {
    let mut cfg = env_cfg.clone();
    cfg.reset_mode = ResetMode::Eval;
    let n_panels = cfg.scheme.num_panels();
    let n = records.len();
    let mut env = Env::new(cfg, records, embedder, 0)?;
    let mut acc = TallyAccumulator::default();
    let mut bought = vec![0u64; n_panels];
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        let mut obs = env.reset()?;
        loop {
            let action = policy.decide(&obs)?;
            let p_pos = obs.embedding[env.dim() + 1];
            let tr = env.step(action)?;
            if let Action::Panel(k) = action {
                bought[k] += 1;
            }
            if tr.done {
                let (Action::Diagnose(pred), Some(truth)) = (action, tr.info.label) else {
                    return Err(contract("episode ended without a diagnosis"));
                };
                acc.record(pred, truth, tr.info.episode_cost);
                scores.push((p_pos, truth));
                break;
            }
            obs = tr.next.expect("non-terminal step yields a state");
        }
    }
    let tally = acc.finish();
    let auroc = auroc(&scores).ok();
    let panel_rates = bought.iter().map(|&b| if n > 0 { b as f64 / n as f64 } else { 0.0 }).collect();
    Ok(EvalReport {
        tally,
        auroc,
        panel_rates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tally(tp: f64, tn: f64, fp: f64, fn_: f64) -> ConfusionTally {
        ConfusionTally::new(tp, tn, fp, fn_, 0.0)
    }

    fn f1_precision_recall_form(t: &ConfusionTally) -> f64 {
        if t.tp == 0.0 {
            0.0
        } else {
            t.tp / (t.tp + 0.5 * (t.fp + t.fn_))
        }
    }

    #[test]
    fn f1_worked_example() {
        let t = tally(0.10, 0.80, 0.05, 0.05);
        assert!((f1_score(&t) - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1_precision_recall_form(&t) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_edge_cases() {
        assert!((f1_score(&tally(0.3, 0.7, 0.0, 0.0)) - 1.0).abs() < 1e-12);
        assert_eq!(f1_score(&tally(0.0, 1.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn am_worked_example() {
        let t = tally(0.15, 0.60, 0.20, 0.05);
        assert!((am_score(&t, 4.0).unwrap() - 0.75).abs() < 1e-12);
        assert!((am_from_rates(&t) - 0.75).abs() < 1e-12);
        let always_n = tally(0.0, 0.8, 0.0, 0.2);
        assert!((am_score(&always_n, 4.0).unwrap() - 0.5).abs() < 1e-12);
        let perfect = tally(0.2, 0.8, 0.0, 0.0);
        assert!((am_score(&perfect, 4.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn am_rejects_inconsistent_ratio() {
        assert!(am_score(&tally(0.15, 0.60, 0.20, 0.05), 3.0).is_err());
        assert!(am_score(&tally(0.15, 0.60, 0.20, 0.05), 0.0).is_err());
    }

    #[test]
    fn auroc_examples() {
        let s = [(0.9, Label::P), (0.8, Label::N), (0.3, Label::P)];
        assert!((auroc(&s).unwrap() - 0.5).abs() < 1e-12);
        let sep = [(0.9, Label::P), (0.8, Label::P), (0.3, Label::N)];
        assert_eq!(auroc(&sep).unwrap(), 1.0);
        let tied = [(0.5, Label::P), (0.5, Label::N), (0.5, Label::N)];
        assert_eq!(auroc(&tied).unwrap(), 0.5);
        assert!(matches!(auroc(&[(0.1, Label::P)]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn accumulator_merges_associatively() {
        let mut a = TallyAccumulator::default();
        a.record(Label::P, Label::P, 10.0);
        a.record(Label::N, Label::P, 0.0);
        let mut b = TallyAccumulator::default();
        b.record(Label::N, Label::N, 5.0);
        let mut ab = a;
        ab.merge(&b);
        let mut ba = b;
        ba.merge(&a);
        assert_eq!(ab.finish(), ba.finish());
        let t = ab.finish();
        assert!((t.tp + t.tn + t.fp + t.fn_ - 1.0).abs() < 1e-12);
        assert!((t.mean_cost - 5.0).abs() < 1e-12);
    }

    fn random_tally() -> impl Strategy<Value = ConfusionTally> {
        (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_filter_map("nonzero", |(a, b, c, d)| {
            let s = a + b + c + d;
            (s > 1e-6).then(|| tally(a / s, b / s, c / s, d / s))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn f1_forms_agree(t in random_tally()) {
            prop_assert!((f1_score(&t) - f1_precision_recall_form(&t)).abs() < 1e-12);
        }

        #[test]
        fn f1_increasing_in_tp_and_tn(t in random_tally(), step in 1e-4f64..0.1) {
            prop_assume!(t.tp > 1e-6);
            let more_tp = tally(t.tp + step, t.tn, t.fp, t.fn_);
            let more_tn = tally(t.tp, t.tn + step, t.fp, t.fn_);
            prop_assert!(f1_score(&more_tp) > f1_score(&t));
            prop_assert!(f1_score(&more_tn) > f1_score(&t));
        }

        #[test]
        fn am_forms_agree(t in random_tally()) {
            prop_assume!(t.tp + t.fn_ > 1e-3 && t.tn + t.fp > 1e-3);
            let ratio = (t.tn + t.fp) / (t.tp + t.fn_);
            prop_assert!((am_score(&t, ratio).unwrap() - am_from_rates(&t)).abs() < 1e-12);
        }

        #[test]
        fn auroc_invariant_to_monotone_transform(
            raw in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60)
        ) {
            let scores: Vec<(f64, Label)> = raw.iter().map(|&(s, p)| (s, Label::from_bool(p))).collect();
            prop_assume!(scores.iter().any(|s| s.1 == Label::P) && scores.iter().any(|s| s.1 == Label::N));
            let warped: Vec<(f64, Label)> = scores.iter().map(|&(s, l)| (s.exp() * 3.0 + 1.0, l)).collect();
            prop_assert!((auroc(&scores).unwrap() - auroc(&warped).unwrap()).abs() < 1e-12);
        }
    }
}

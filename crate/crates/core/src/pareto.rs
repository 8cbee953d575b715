//! Grid sweeps over the shaping weights and cost-metric upper envelopes.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::dataset::{PanelScheme, PatientRecord};
use crate::encoder::Encoder;
use crate::env::{EnvConfig, ResetMode, ShapingParams};
use crate::error::{contract, Error, Result};
use crate::io::derive_seed;
use crate::metrics::{am_score, f1_score, ConfusionTally};
use crate::ndgrad::save_checkpoint;
use crate::policy::ActorCritic;
use crate::trainer::{evaluate, run_sm_ddpo, SmDdpoConfig};

/// `n` points from `lo` to `hi` evenly spaced in log scale.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub pairs: Vec<ShapingParams>,
}

impl Default for SweepGrid {
    /// 19 lambda values in [0.25, 16] by 10 rho values in [-3, -0.01].
    fn default() -> Self {
        Self::product(&log_space(0.25, 16.0, 19), &Self::default_rhos())
    }
}

impl SweepGrid {
    pub fn default_rhos() -> Vec<f64> {
        log_space(0.01, 3.0, 10).into_iter().map(|r| -r).collect()
    }

    pub fn product(lambdas: &[f64], rhos: &[f64]) -> Self {
        let pairs = lambdas
            .iter()
            .flat_map(|&lambda| rhos.iter().map(move |&rho| ShapingParams { lambda, rho }))
            .collect();
        Self { pairs }
    }

    /// Lambda fixed to the class ratio, rho swept; for AM fronts.
    pub fn am(class_ratio: f64, rhos: &[f64]) -> Self {
        Self::product(&[class_ratio], rhos)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.pairs {
            p.validate()?;
        }
        let mut keys: Vec<(u64, u64)> = self.pairs.iter().map(|p| (p.lambda.to_bits(), p.rho.to_bits())).collect();
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Spec("sweep grid contains duplicate (lambda, rho) pairs".into()));
        }
        Ok(())
    }
}

/// One evaluated grid instance. Failed instances keep their grid key and
/// carry NaN metrics with the reason in `checkpoint`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub lambda: f64,
    pub rho: f64,
    pub f1: f64,
    pub am: f64,
    pub auroc: f64,
    pub mean_cost: f64,
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub seed: u64,
    pub checkpoint: String,
}

pub const FAILURE_PREFIX: &str = "failed:";

impl ParetoPoint {
    pub fn from_tally(params: ShapingParams, tally: &ConfusionTally, am: f64, auroc: f64, seed: u64, checkpoint: String) -> Self {
        Self {
            lambda: params.lambda,
            rho: params.rho,
            f1: f1_score(tally),
            am,
            auroc,
            mean_cost: tally.mean_cost,
            tp: tally.tp,
            tn: tally.tn,
            fp: tally.fp,
            fn_: tally.fn_,
            seed,
            checkpoint,
        }
    }

    pub fn failed(params: ShapingParams, seed: u64, reason: &str) -> Self {
        let reason: String = reason.chars().map(|c| if c == '\n' { ' ' } else { c }).collect();
        Self {
            lambda: params.lambda,
            rho: params.rho,
            f1: f64::NAN,
            am: f64::NAN,
            auroc: f64::NAN,
            mean_cost: f64::NAN,
            tp: f64::NAN,
            tn: f64::NAN,
            fp: f64::NAN,
            fn_: f64::NAN,
            seed,
            checkpoint: format!("{FAILURE_PREFIX}{reason}"),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.checkpoint.starts_with(FAILURE_PREFIX)
    }

    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::F1 => self.f1,
            Metric::Am => self.am,
        }
    }

    pub fn tally(&self) -> ConfusionTally {
        ConfusionTally::new(self.tp, self.tn, self.fp, self.fn_, self.mean_cost)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1,
    Am,
}

/// What one grid instance returns.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub tally: ConfusionTally,
    pub am: f64,
    pub auroc: f64,
    pub checkpoint: String,
}

/// Runs `instance` on every grid pair with seeds derived from `root_seed`.
/// Output follows grid order regardless of `jobs`.
pub fn sweep_grid<F>(grid: &SweepGrid, root_seed: u64, jobs: usize, instance: F) -> Result<Vec<ParetoPoint>>
where
    F: Fn(usize, ShapingParams, u64) -> Result<SweepOutcome> + Sync,
{
    grid.validate()?;
    let run = |(i, &p): (usize, &ShapingParams)| {
        let seed = derive_seed(root_seed, "sweep", i as u64);
        match instance(i, p, seed) {
            Ok(o) => ParetoPoint::from_tally(p, &o.tally, o.am, o.auroc, seed, o.checkpoint),
            Err(e) => ParetoPoint::failed(p, seed, &e.to_string()),
        }
    };
    if jobs <= 1 {
        return Ok(grid.pairs.iter().enumerate().map(run).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| contract(e.to_string()))?;
    Ok(pool.install(|| grid.pairs.par_iter().enumerate().map(run).collect()))
}

/// Everything needed to train and score one grid instance.
#[derive(Clone)]
pub struct SweepRecipe {
    pub encoder: Arc<Encoder>,
    pub scheme: PanelScheme,
    pub cost_unit: f64,
    pub trainer: SmDdpoConfig,
    pub train: Arc<Vec<PatientRecord>>,
    pub val: Arc<Vec<PatientRecord>>,
    pub test: Arc<Vec<PatientRecord>>,
    /// When set, each instance's classifier and policy are saved here and the
    /// file name goes into the point's `checkpoint` column.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Payload of a per-instance sweep checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCheckpoint {
    pub lambda: f64,
    pub rho: f64,
    pub seed: u64,
    pub classifier: Classifier,
    pub policy: ActorCritic,
}

pub const SWEEP_CHECKPOINT_KIND: &str = "sweep-instance";

impl SweepRecipe {
    pub fn run(&self, params: ShapingParams, seed: u64) -> Result<SweepOutcome> {
        let mut env_cfg = EnvConfig::new(self.scheme.clone(), params, ResetMode::Train);
        env_cfg.cost_unit = self.cost_unit;
        let clf = Classifier::new(self.encoder.dim(), self.trainer.classifier.hidden, derive_seed(seed, "classifier-init", 0))?;
        let out = run_sm_ddpo(
            self.encoder.clone(),
            clf,
            None,
            self.train.clone(),
            self.val.clone(),
            &env_cfg,
            &self.trainer,
            seed,
        )?;
        let report = evaluate(&out.policy, &out.embedder, self.test.clone(), &env_cfg)?;
        let pos = self.test.iter().filter(|r| r.label.is_positive()).count();
        let am = if pos > 0 && pos < self.test.len() {
            am_score(&report.tally, (self.test.len() - pos) as f64 / pos as f64)?
        } else {
            f64::NAN
        };
        let checkpoint = match &self.checkpoint_dir {
            Some(dir) => {
                let name = format!("instance-{seed:016x}.json");
                let payload = SweepCheckpoint {
                    lambda: params.lambda,
                    rho: params.rho,
                    seed,
                    classifier: out.classifier,
                    policy: out.policy,
                };
                save_checkpoint(&dir.join(&name), SWEEP_CHECKPOINT_KIND, &payload)?;
                name
            }
            None => String::new(),
        };
        Ok(SweepOutcome {
            tally: report.tally,
            am,
            auroc: report.auroc.unwrap_or(f64::NAN),
            checkpoint,
        })
    }
}

fn lex(a: &ParetoPoint, b: &ParetoPoint) -> Ordering {
    a.lambda.total_cmp(&b.lambda).then(a.rho.total_cmp(&b.rho))
}

/// Points not beaten by any cheaper-or-equal point with a strictly higher
/// metric, sorted by cost. Ties on (cost, metric) keep the smallest (lambda, rho).
/// Failed or non-finite points are ignored.
pub fn upper_envelope(points: &[ParetoPoint], metric: Metric) -> Vec<ParetoPoint> {
    let mut pts: Vec<&ParetoPoint> = points
        .iter()
        .filter(|p| !p.is_failed() && p.mean_cost.is_finite() && p.metric(metric).is_finite())
        .collect();
    pts.sort_by(|a, b| {
        a.mean_cost
            .total_cmp(&b.mean_cost)
            .then(b.metric(metric).total_cmp(&a.metric(metric)))
            .then(lex(a, b))
    });
    let mut out: Vec<ParetoPoint> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut i = 0;
    while i < pts.len() {
        let head = pts[i];
        let m = head.metric(metric);
        if m >= best {
            out.push(head.clone());
            best = m;
        }
        while i < pts.len() && pts[i].mean_cost == head.mean_cost {
            i += 1;
        }
    }
    out
}

fn csv_text(points: &[ParetoPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p)?;
    }
    if points.is_empty() {
        w.write_record(["lambda", "rho", "f1", "am", "auroc", "mean_cost", "tp", "tn", "fp", "fn", "seed", "checkpoint"])?;
    }
    let bytes = w.into_inner().map_err(|e| contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Serializes points with columns `lambda,rho,f1,am,auroc,mean_cost,tp,tn,fp,fn,seed,checkpoint`.
pub fn to_csv(points: &[ParetoPoint]) -> Result<String> {
    csv_text(points)
}

pub fn from_csv(text: &str) -> Result<Vec<ParetoPoint>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Scatter of all points with the envelope drawn as a step line.
pub fn to_svg(points: &[ParetoPoint], envelope: &[ParetoPoint], metric: Metric) -> String {
    let (w, h, pad) = (640.0, 420.0, 50.0);
    let ok: Vec<&ParetoPoint> = points.iter().filter(|p| !p.is_failed() && p.metric(metric).is_finite()).collect();
    let xmax = ok.iter().map(|p| p.mean_cost).fold(0.0f64, f64::max).max(1.0);
    let ymax = ok.iter().map(|p| p.metric(metric)).fold(0.0f64, f64::max).max(1e-9);
    let sx = |c: f64| pad + (w - 2.0 * pad) * c / xmax;
    let sy = |m: f64| h - pad - (h - 2.0 * pad) * m / ymax;
    let label = match metric {
        Metric::F1 => "F1",
        Metric::Am => "AM",
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{y0}" stroke="black"/>"#,
        y0 = h - pad,
        x1 = w - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">mean cost (max {xmax:.1})</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" font-size="12" transform="rotate(-90 15 {})">{label} (max {ymax:.3})</text>"#, h / 2.0, h / 2.0);
    for p in &ok {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#4a78b5" fill-opacity="0.6"/>"##,
            sx(p.mean_cost),
            sy(p.metric(metric))
        );
    }
    if !envelope.is_empty() {
        let mut d = String::new();
        for (i, p) in envelope.iter().enumerate() {
            let (x, y) = (sx(p.mean_cost), sy(p.metric(metric)));
            if i == 0 {
                let _ = write!(d, "M{x:.2},{y:.2}");
            } else {
                let _ = write!(d, " H{x:.2} V{y:.2}");
            }
        }
        let _ = writeln!(s, r##"<path d="{d}" fill="none" stroke="#e0a800" stroke-width="2"/>"##);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(cost: f64, f1: f64) -> ParetoPoint {
        ParetoPoint {
            lambda: 1.0,
            rho: -1.0,
            f1,
            am: f1,
            auroc: 0.5,
            mean_cost: cost,
            tp: 0.0,
            tn: 0.0,
            fp: 0.0,
            fn_: 0.0,
            seed: 0,
            checkpoint: String::new(),
        }
    }

    fn quadratic_envelope(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
        let mut keep: Vec<ParetoPoint> = points
            .iter()
            .filter(|p| !points.iter().any(|q| q.mean_cost <= p.mean_cost && q.f1 > p.f1))
            .filter(|p| {
                !points
                    .iter()
                    .any(|q| q.mean_cost == p.mean_cost && q.f1 == p.f1 && lex(q, p) == Ordering::Less)
            })
            .cloned()
            .collect();
        keep.sort_by(|a, b| a.mean_cost.total_cmp(&b.mean_cost));
        keep.dedup_by(|a, b| a.mean_cost == b.mean_cost && a.f1 == b.f1);
        keep
    }

    #[test]
    fn default_grid_has_190_distinct_pairs() {
        let g = SweepGrid::default();
        assert_eq!(g.len(), 190);
        g.validate().unwrap();
        assert!((g.pairs[0].lambda - 0.25).abs() < 1e-15);
        assert_eq!(g.pairs.last().unwrap().lambda, 16.0);
        assert!((g.pairs[0].rho + 0.01).abs() < 1e-15);
        assert_eq!(g.pairs[9].rho, -3.0);
    }

    #[test]
    fn duplicate_pairs_rejected() {
        let g = SweepGrid::product(&[1.0, 1.0], &[-0.1]);
        assert!(g.validate().is_err());
    }

    #[test]
    fn envelope_by_definition() {
        let pts = vec![pt(10.0, 0.3), pt(15.0, 0.45), pt(20.0, 0.5), pt(20.0, 0.4)];
        let env = upper_envelope(&pts, Metric::F1);
        let got: Vec<(f64, f64)> = env.iter().map(|p| (p.mean_cost, p.f1)).collect();
        assert_eq!(got, vec![(10.0, 0.3), (15.0, 0.45), (20.0, 0.5)]);
        assert_eq!(upper_envelope(&pts[..1], Metric::F1), vec![pts[0].clone()]);
    }

    #[test]
    fn envelope_matches_quadratic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.random_range(1..200);
            let pts: Vec<ParetoPoint> = (0..n)
                .map(|_| {
                    let mut p = pt(rng.random_range(0..20) as f64, rng.random_range(0..15) as f64 / 14.0);
                    p.lambda = rng.random_range(0..3) as f64;
                    p.rho = -(rng.random_range(0..3) as f64);
                    p
                })
                .collect();
            let env = upper_envelope(&pts, Metric::F1);
            assert_eq!(env, quadratic_envelope(&pts));
            assert_eq!(upper_envelope(&env, Metric::F1), env);
            assert!(env.windows(2).all(|w| w[0].f1 <= w[1].f1));
        }
    }

    #[test]
    fn failed_points_are_kept_in_sweep_but_not_in_envelope() {
        let grid = SweepGrid::product(&[1.0, 2.0], &[-0.1]);
        let pts = sweep_grid(&grid, 3, 1, |i, _, _| {
            if i == 0 {
                Err(Error::Training {
                    batch: 0,
                    msg: "diverged".into(),
                })
            } else {
                Ok(SweepOutcome {
                    tally: ConfusionTally::new(0.1, 0.8, 0.05, 0.05, 12.0),
                    am: 0.5,
                    auroc: 0.7,
                    checkpoint: String::new(),
                })
            }
        })
        .unwrap();
        assert_eq!(pts.len(), 2);
        assert!(pts[0].is_failed());
        let env = upper_envelope(&pts, Metric::F1);
        assert_eq!(env.len(), 1);
        let text = to_csv(&pts).unwrap();
        assert!(text.starts_with("lambda,rho,f1,am,auroc,mean_cost,tp,tn,fp,fn,seed,checkpoint\n"));
        let back = from_csv(&text).unwrap();
        assert_eq!(back[1], pts[1]);
        assert!(back[0].is_failed());
    }

    #[test]
    fn sweep_is_order_insensitive() {
        let grid = SweepGrid::product(&log_space(0.5, 4.0, 4), &[-0.1, -1.0]);
        let f = |_: usize, p: ShapingParams, seed: u64| {
            let tp = 0.1 * (seed % 7) as f64 / 7.0;
            Ok(SweepOutcome {
                tally: ConfusionTally::new(tp, 0.8, 0.1, 0.1 - tp, p.lambda - p.rho),
                am: 0.0,
                auroc: 0.5,
                checkpoint: String::new(),
            })
        };
        let a = to_csv(&sweep_grid(&grid, 1, 1, f).unwrap()).unwrap();
        let b = to_csv(&sweep_grid(&grid, 1, 3, f).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn svg_is_well_formed() {
        let pts = vec![pt(10.0, 0.3), pt(15.0, 0.45)];
        let svg = to_svg(&pts, &upper_envelope(&pts, Metric::F1), Metric::F1);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 2);
    }
}

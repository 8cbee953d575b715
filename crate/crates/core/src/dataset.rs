//! Patient records, panel layouts, masking, splitting and file formats.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Name of the label column in dataset CSV files.
pub const LABEL_COLUMN: &str = "y";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    /// Healthy / negative class.
    N,
    /// Ill / positive class.
    P,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::P
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::P
        } else {
            Label::N
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// Feature values; cells missing in the source hold 0.0.
    pub features: Vec<f64>,
    /// `true` where the source had no value (never used as ground truth).
    pub source_missing: Vec<bool>,
    pub label: Label,
}

impl PatientRecord {
    pub fn complete(id: impl Into<String>, features: Vec<f64>, label: Label) -> Self {
        let d = features.len();
        Self {
            id: id.into(),
            features,
            source_missing: vec![false; d],
            label,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub name: String,
    pub cost: f64,
    pub features: Vec<usize>,
}

/// Partition of the feature vector into priced panels and free features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelScheme {
    feature_names: Vec<String>,
    panels: Vec<Panel>,
    visible: Vec<usize>,
}

/// On-disk layout of a panel scheme (feature names instead of indices).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemeFile {
    panels: Vec<PanelEntry>,
    #[serde(default)]
    visible: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PanelEntry {
    name: String,
    cost: f64,
    features: Vec<String>,
}

impl PanelScheme {
    /// Validates and builds a scheme. Every feature index in `0..feature_names.len()`
    /// must belong to exactly one panel or to `visible`.
    pub fn new(feature_names: Vec<String>, panels: Vec<Panel>, visible: Vec<usize>) -> Result<Self> {
        let d = feature_names.len();
        let mut seen = vec![false; d];
        let mut claim = |i: usize, owner: &str| -> Result<()> {
            if i >= d {
                return Err(Error::Spec(format!("{owner} references feature {i} but d = {d}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Spec(format!("feature {i} is claimed twice ({owner})")));
            }
            Ok(())
        };
        for &i in &visible {
            claim(i, "visible set")?;
        }
        for p in &panels {
            if !(p.cost >= 0.0) || !p.cost.is_finite() {
                return Err(Error::Spec(format!("panel '{}' has invalid cost {}", p.name, p.cost)));
            }
            if p.features.is_empty() {
                return Err(Error::Spec(format!("panel '{}' has no features", p.name)));
            }
            for &i in &p.features {
                claim(i, &p.name)?;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Spec(format!("feature {i} belongs to no panel and is not visible")));
        }
        let names: BTreeSet<&String> = feature_names.iter().collect();
        if names.len() != d {
            return Err(Error::Spec("duplicate feature names".into()));
        }
        Ok(Self {
            feature_names,
            panels,
            visible,
        })
    }

    /// Scheme with anonymous feature names `f0..f{d-1}`.
    pub fn from_layout(panels: Vec<(&str, f64, Vec<usize>)>, visible: Vec<usize>) -> Result<Self> {
        let d = panels.iter().map(|p| p.2.len()).sum::<usize>() + visible.len();
        let names = (0..d).map(|i| format!("f{i}")).collect();
        let panels = panels
            .into_iter()
            .map(|(name, cost, features)| Panel {
                name: name.to_string(),
                cost,
                features,
            })
            .collect();
        Self::new(names, panels, visible)
    }

    pub fn d(&self) -> usize {
        self.feature_names.len()
    }

    pub fn num_panels(&self) -> usize {
        self.panels.len()
    }

    pub fn panels(&self) -> &[Panel] {
        &self.panels
    }

    pub fn panel(&self, k: usize) -> &Panel {
        &self.panels[k]
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn total_cost(&self) -> f64 {
        self.panels.iter().map(|p| p.cost).sum()
    }

    /// Mask at episode start: visible features only.
    pub fn initial_mask(&self) -> ObservationMask {
        let mut bits = vec![false; self.d()];
        for &i in &self.visible {
            bits[i] = true;
        }
        ObservationMask { bits }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SchemeFile = serde_json::from_str(text)?;
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut intern = |n: &String| -> Result<usize> {
            if index.contains_key(n) {
                return Err(Error::Spec(format!("feature '{n}' listed twice")));
            }
            index.insert(n.clone(), names.len());
            names.push(n.clone());
            Ok(names.len() - 1)
        };
        let visible = file.visible.iter().map(&mut intern).collect::<Result<Vec<_>>>()?;
        let mut panels = Vec::with_capacity(file.panels.len());
        for p in &file.panels {
            let features = p.features.iter().map(&mut intern).collect::<Result<Vec<_>>>()?;
            panels.push(Panel {
                name: p.name.clone(),
                cost: p.cost,
                features,
            });
        }
        Self::new(names, panels, visible)
    }

    pub fn to_json(&self) -> Result<String> {
        let name = |i: &usize| self.feature_names[*i].clone();
        let file = SchemeFile {
            panels: self
                .panels
                .iter()
                .map(|p| PanelEntry {
                    name: p.name.clone(),
                    cost: p.cost,
                    features: p.features.iter().map(name).collect(),
                })
                .collect(),
            visible: self.visible.iter().map(name).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

/// Which features the agent has seen.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservationMask {
    pub bits: Vec<bool>,
}

impl ObservationMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn panel_observed(&self, scheme: &PanelScheme, k: usize) -> bool {
        self.bits[scheme.panel(k).features[0]]
    }

    pub fn observe_panel(&mut self, scheme: &PanelScheme, k: usize) {
        for &i in &scheme.panel(k).features {
            self.bits[i] = true;
        }
    }

    /// Visible features observed and every panel all-on or all-off.
    pub fn is_panel_atomic(&self, scheme: &PanelScheme) -> bool {
        scheme.visible().iter().all(|&i| self.bits[i])
            && scheme.panels().iter().all(|p| {
                let first = self.bits[p.features[0]];
                p.features.iter().all(|&i| self.bits[i] == first)
            })
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// `x ⊙ M` with unobserved entries set to zero.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.bits).map(|(&v, &b)| if b { v } else { 0.0 }).collect()
    }
}

/// Mask with visible features on and each panel observed with probability 1/2.
pub fn random_panel_mask<R: Rng + ?Sized>(scheme: &PanelScheme, rng: &mut R) -> ObservationMask {
    let mut mask = scheme.initial_mask();
    for k in 0..scheme.num_panels() {
        if rng.random_bool(0.5) {
            mask.observe_panel(scheme, k);
        }
    }
    mask
}

/// Independent random panel masks, `per_record_copies` per record.
pub fn random_mask_augment(
    records: &[PatientRecord],
    scheme: &PanelScheme,
    per_record_copies: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, ObservationMask)>> {
    if per_record_copies == 0 {
        return Err(contract("per_record_copies must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(records.len() * per_record_copies);
    for r in records {
        if r.dim() != scheme.d() {
            return Err(contract(format!("record '{}' has {} features, scheme has {}", r.id, r.dim(), scheme.d())));
        }
        for _ in 0..per_record_copies {
            out.push((r.features.clone(), random_panel_mask(scheme, &mut rng)));
        }
    }
    Ok(out)
}

/// Fractions for the five parts: encoder-pretrain, rl-train, encoder-validation,
/// rl-validation, test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: [f64; 5],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fractions: [0.25, 0.50, 0.05, 0.10, 0.10],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::Spec(format!("negative split fraction in {:?}", self.fractions)));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Spec(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// The five disjoint parts produced by [`split`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataSplits {
    pub encoder_train: Vec<PatientRecord>,
    pub rl_train: Vec<PatientRecord>,
    pub encoder_val: Vec<PatientRecord>,
    pub rl_val: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

impl DataSplits {
    pub fn parts(&self) -> [&Vec<PatientRecord>; 5] {
        [&self.encoder_train, &self.rl_train, &self.encoder_val, &self.rl_val, &self.test]
    }

    pub fn parts_mut(&mut self) -> [&mut Vec<PatientRecord>; 5] {
        [
            &mut self.encoder_train,
            &mut self.rl_train,
            &mut self.encoder_val,
            &mut self.rl_val,
            &mut self.test,
        ]
    }

    pub fn sizes(&self) -> [usize; 5] {
        self.parts().map(|p| p.len())
    }
}

/// Largest-remainder apportionment of `n` items by `fractions`; ties go to the
/// earlier part.
fn apportion(n: usize, fractions: &[f64; 5]) -> [usize; 5] {
    let mut out = [0usize; 5];
    let mut rema = [(0.0f64, 0usize); 5];
    for k in 0..5 {
        let exact = fractions[k] * n as f64;
        out[k] = exact.floor() as usize;
        rema[k] = (exact - exact.floor(), k);
    }
    let assigned: usize = out.iter().sum();
    rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(r, k) in rema.iter().take(n.saturating_sub(assigned)) {
        if r > 0.0 || fractions[k] > 0.0 {
            out[k] += 1;
        }
    }
    out
}

/// Moves single positives from the most over-served part into non-empty parts
/// that rounding left with none, while every count stays within one record of
/// proportional.
fn rebalance_positives(counts: &mut [usize; 5], sizes: &[usize; 5], n_pos: usize, fractions: &[f64; 5]) {
    for k in 0..5 {
        if counts[k] > 0 || sizes[k] == 0 || fractions[k] <= 0.0 {
            continue;
        }
        let donor = (0..5)
            .filter(|&j| j != k && counts[j] >= 2)
            .filter(|&j| counts[j] as f64 >= fractions[j] * n_pos as f64)
            .max_by(|&a, &b| {
                let sa = counts[a] as f64 - fractions[a] * n_pos as f64;
                let sb = counts[b] as f64 - fractions[b] * n_pos as f64;
                sa.partial_cmp(&sb).unwrap().then(b.cmp(&a))
            });
        if let Some(j) = donor {
            counts[j] -= 1;
            counts[k] += 1;
        }
    }
}

/// Stratified five-way split. Part sizes follow the fractions to rounding and
/// each part's positive count is within one record of proportional.
pub fn split(records: &[PatientRecord], spec: &SplitSpec) -> Result<DataSplits> {
    spec.validate()?;
    let n = records.len();
    let mut pos: Vec<usize> = (0..n).filter(|&i| records[i].label.is_positive()).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| !records[i].label.is_positive()).collect();
    let sizes = apportion(n, &spec.fractions);
    let mut pos_counts = apportion(pos.len(), &spec.fractions);
    rebalance_positives(&mut pos_counts, &sizes, pos.len(), &spec.fractions);
    for k in 0..5 {
        if spec.fractions[k] > 0.0 && sizes[k] > 0 && pos_counts[k] == 0 {
            return Err(Error::Stratification(format!(
                "part {k} would receive 0 positives ({} positives in {} records)",
                pos.len(),
                n
            )));
        }
        if pos_counts[k] > sizes[k] {
            return Err(Error::Stratification(format!(
                "part {k} needs {} positives but holds only {} records",
                pos_counts[k], sizes[k]
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut out = DataSplits::default();
    let (mut pi, mut ni) = (0, 0);
    for (k, part) in out.parts_mut().into_iter().enumerate() {
        let n_pos = pos_counts[k];
        let n_neg = sizes[k] - n_pos;
        let mut idx: Vec<usize> = pos[pi..pi + n_pos].to_vec();
        idx.extend_from_slice(&neg[ni..ni + n_neg]);
        pi += n_pos;
        ni += n_neg;
        idx.sort_unstable();
        part.extend(idx.into_iter().map(|i| records[i].clone()));
    }
    debug_assert_eq!(pi + ni, n);
    Ok(out)
}

/// Per-feature affine normalisation fitted on training parts only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits mean and (population) standard deviation from non-missing cells.
    pub fn fit<'a>(parts: impl IntoIterator<Item = &'a [PatientRecord]>) -> Result<Self> {
        let parts: Vec<&[PatientRecord]> = parts.into_iter().collect();
        let d = parts
            .iter()
            .flat_map(|p| p.first())
            .map(|r| r.dim())
            .next()
            .ok_or_else(|| contract("cannot fit a standardizer on no records"))?;
        let mut sum = vec![0.0; d];
        let mut count = vec![0usize; d];
        for r in parts.iter().flat_map(|p| p.iter()) {
            for i in 0..d {
                if !r.source_missing[i] {
                    sum[i] += r.features[i];
                    count[i] += 1;
                }
            }
        }
        let mean: Vec<f64> = (0..d)
            .map(|i| if count[i] > 0 { sum[i] / count[i] as f64 } else { 0.0 })
            .collect();
        let mut ss = vec![0.0; d];
        for r in parts.iter().flat_map(|p| p.iter()) {
            for i in 0..d {
                if !r.source_missing[i] {
                    let c = r.features[i] - mean[i];
                    ss[i] += c * c;
                }
            }
        }
        let std = (0..d)
            .map(|i| {
                let v = if count[i] > 0 { ss[i] / count[i] as f64 } else { 0.0 };
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, records: &mut [PatientRecord]) {
        for r in records {
            for i in 0..r.dim() {
                r.features[i] = if r.source_missing[i] {
                    0.0
                } else {
                    (r.features[i] - self.mean[i]) / self.std[i]
                };
            }
        }
    }
}

/// Reads a dataset CSV whose header lists the scheme's feature names (any
/// order) plus the label column `y`. Empty cells are source-missing.
pub fn load_csv(path: &Path, scheme: &PanelScheme) -> Result<Vec<PatientRecord>> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, scheme)
}

pub fn parse_csv(text: &str, scheme: &PanelScheme) -> Result<Vec<PatientRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    let index: HashMap<&str, usize> = scheme
        .feature_names()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut column_to_feature = Vec::with_capacity(header.len());
    let mut label_col = None;
    let mut seen = vec![false; scheme.d()];
    for (c, name) in header.iter().enumerate() {
        let name = name.trim();
        if name == LABEL_COLUMN {
            label_col = Some(c);
            column_to_feature.push(None);
        } else if let Some(&i) = index.get(name) {
            seen[i] = true;
            column_to_feature.push(Some(i));
        } else {
            return Err(Error::Schema(format!("unknown column '{name}'")));
        }
    }
    let label_col = label_col.ok_or_else(|| Error::Schema(format!("missing label column '{LABEL_COLUMN}'")))?;
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Schema(format!(
            "column for feature '{}' is absent",
            scheme.feature_names()[i]
        )));
    }
    let mut out = Vec::new();
    for (row_no, row) in rdr.records().enumerate() {
        let line = row_no + 2;
        let row = row.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if row.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), row.len()),
            });
        }
        let mut features = vec![0.0; scheme.d()];
        let mut missing = vec![false; scheme.d()];
        let mut label = None;
        for (c, cell) in row.iter().enumerate() {
            let cell = cell.trim();
            if c == label_col {
                label = Some(match cell {
                    "0" => Label::N,
                    "1" => Label::P,
                    other => {
                        return Err(Error::Parse {
                            line,
                            msg: format!("label must be 0 or 1, found '{other}'"),
                        })
                    }
                });
            } else if let Some(i) = column_to_feature[c] {
                if cell.is_empty() {
                    missing[i] = true;
                } else {
                    let v: f64 = cell.parse().map_err(|_| Error::Parse {
                        line,
                        msg: format!("cannot parse '{cell}' as a number"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Parse {
                            line,
                            msg: format!("non-finite value '{cell}'"),
                        });
                    }
                    features[i] = v;
                }
            }
        }
        out.push(PatientRecord {
            id: format!("row{}", row_no),
            features,
            source_missing: missing,
            label: label.expect("label column present"),
        });
    }
    Ok(out)
}

/// Serialises records as dataset CSV (feature columns in scheme order, then `y`).
pub fn to_csv(records: &[PatientRecord], scheme: &PanelScheme) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = scheme.feature_names().iter().map(String::as_str).collect();
    header.push(LABEL_COLUMN);
    w.write_record(&header)?;
    for r in records {
        let mut row: Vec<String> = (0..r.dim())
            .map(|i| if r.source_missing[i] { String::new() } else { format!("{}", r.features[i]) })
            .collect();
        row.push(if r.label.is_positive() { "1".into() } else { "0".into() });
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Class-conditional Gaussian generator standing in for a clinical cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub positive_prior: f64,
    pub mean_negative: Vec<f64>,
    pub mean_positive: Vec<f64>,
    /// Row-major `d x d` covariance matrices.
    pub cov_negative: Vec<Vec<f64>>,
    pub cov_positive: Vec<Vec<f64>>,
    pub scheme: PanelScheme,
}

impl SyntheticSpec {
    /// Four features: a cheap informative panel (mean shift +1.5 on both of its
    /// features for positives, cost 10) and an expensive pure-noise panel
    /// (cost 100). Unit covariance for both classes.
    pub fn cheap_informative(n: usize, positive_prior: f64) -> Self {
        let scheme = PanelScheme::new(
            vec!["a1".into(), "a2".into(), "b1".into(), "b2".into()],
            vec![
                Panel {
                    name: "A".into(),
                    cost: 10.0,
                    features: vec![0, 1],
                },
                Panel {
                    name: "B".into(),
                    cost: 100.0,
                    features: vec![2, 3],
                },
            ],
            vec![],
        )
        .expect("static scheme is valid");
        let eye: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        Self {
            n,
            positive_prior,
            mean_negative: vec![0.0; 4],
            mean_positive: vec![1.5, 1.5, 0.0, 0.0],
            cov_negative: eye.clone(),
            cov_positive: eye,
            scheme,
        }
    }

    fn cholesky(&self, cov: &[Vec<f64>], which: &str) -> Result<DMatrix<f64>> {
        let d = self.scheme.d();
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(Error::Spec(format!("{which} covariance must be {d}x{d}")));
        }
        let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        if (&m - m.transpose()).abs().max() > 1e-12 {
            return Err(Error::Spec(format!("{which} covariance is not symmetric")));
        }
        m.cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::Spec(format!("{which} covariance is not positive definite")))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.scheme.d();
        if !(self.positive_prior > 0.0 && self.positive_prior < 1.0) {
            return Err(Error::Spec(format!("positive prior {} outside (0,1)", self.positive_prior)));
        }
        if self.mean_negative.len() != d || self.mean_positive.len() != d {
            return Err(Error::Spec(format!("class means must have length {d}")));
        }
        self.cholesky(&self.cov_negative, "negative")?;
        self.cholesky(&self.cov_positive, "positive")?;
        Ok(())
    }
}

/// Draws `spec.n` i.i.d. records. The label is drawn first, then the features
/// from the class-conditional Gaussian.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Vec<PatientRecord>, PanelScheme)> {
    spec.validate()?;
    let d = spec.scheme.d();
    let l_neg = spec.cholesky(&spec.cov_negative, "negative")?;
    let l_pos = spec.cholesky(&spec.cov_positive, "positive")?;
    let mu_neg = DVector::from_column_slice(&spec.mean_negative);
    let mu_pos = DVector::from_column_slice(&spec.mean_positive);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.n);
    for idx in 0..spec.n {
        let positive = rng.random_bool(spec.positive_prior);
        let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = if positive { &mu_pos + &l_pos * e } else { &mu_neg + &l_neg * e };
        out.push(PatientRecord::complete(format!("s{idx}"), x.as_slice().to_vec(), Label::from_bool(positive)));
    }
    Ok((out, spec.scheme.clone()))
}

//! OOD confidence scores.
//!
//! Every score is oriented so that larger means "more in-distribution" when
//! used as-is; the energy baseline is therefore emitted as −E = LSE. The
//! composite PGE score is `base × guidance`, where `base = LSE(logits)` and
//! the guidance term compares the prior with the prediction.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::PViTModel;
use crate::prior::{LogitsTable, PriorProvider};
use crate::registry::{self, Named};
use crate::tensor::{argmax, logsumexp, softmax};

/// Probabilities are clamped to this before any log.
pub const PROB_CLAMP: f64 = 1e-12;

fn check_finite(z: &[f64], what: &str) -> Result<()> {
    if z.is_empty() {
        return Err(Error::Shape(format!("{what}: empty logit vector")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: non-finite logits")));
    }
    Ok(())
}

fn check_same_k(prior: &[f64], predicted: &[f64]) -> Result<()> {
    if prior.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "prior has {} classes, prediction has {}",
            prior.len(),
            predicted.len()
        )));
    }
    Ok(())
}

/// E = −LSE(z).
pub fn energy(z: &[f64]) -> Result<f64> {
    check_finite(z, "energy")?;
    Ok(-logsumexp(z))
}

/// −E = LSE(z).
pub fn base_score(z: &[f64]) -> Result<f64> {
    check_finite(z, "base score")?;
    Ok(logsumexp(z))
}

pub fn msp(z: &[f64]) -> Result<f64> {
    check_finite(z, "msp")?;
    Ok(softmax(z).into_iter().fold(f64::NEG_INFINITY, f64::max))
}

pub fn max_logit(z: &[f64]) -> Result<f64> {
    check_finite(z, "max logit")?;
    Ok(z.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// −ln max(softmax(prior)_k, 1e-12).
pub fn guidance_ce(prior: &[f64], class: usize) -> Result<f64> {
    check_finite(prior, "CE guidance")?;
    if class >= prior.len() {
        return Err(Error::Index(format!("class {class} outside [0, {})", prior.len())));
    }
    // LSE − p_k = −ln q_k, computed without forming q_k.
    let nll = (logsumexp(prior) - prior[class]).max(0.0);
    Ok(nll.min(-PROB_CLAMP.ln()))
}

/// KL(P ‖ Q) with P = softmax(prior), Q = softmax(predicted), both clamped.
pub fn guidance_kl(prior: &[f64], predicted: &[f64]) -> Result<f64> {
    check_same_k(prior, predicted)?;
    check_finite(prior, "KL guidance")?;
    check_finite(predicted, "KL guidance")?;
    let p = softmax(prior);
    let q = softmax(predicted);
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| {
            let (pi, qi) = (pi.max(PROB_CLAMP), qi.max(PROB_CLAMP));
            pi * (pi / qi).ln()
        })
        .sum();
    Ok(kl.max(0.0))
}

/// Euclidean distance between the raw logit vectors.
pub fn guidance_ed(prior: &[f64], predicted: &[f64]) -> Result<f64> {
    check_same_k(prior, predicted)?;
    check_finite(prior, "ED guidance")?;
    check_finite(predicted, "ED guidance")?;
    Ok(prior.iter().zip(predicted).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

pub fn pge(base: f64, guidance: f64) -> f64 {
    base * guidance
}

/// `(factored, expanded)` forms of the CE-guided energy product for class `k`:
/// `(−z_k + LSE)·LSE` and `−z_k·LSE + LSE²`.
///
/// When class `k` dominates, the two expanded terms nearly cancel, so they
/// are formed with error-free products and summed compensated. A plain f64
/// evaluation loses up to ~1e-5 relative there.
pub fn cefe_expand(z: &[f64], k: usize) -> Result<(f64, f64)> {
    check_finite(z, "cefe")?;
    if k >= z.len() {
        return Err(Error::Index(format!("class {k} outside [0, {})", z.len())));
    }
    let lse = logsumexp(z);
    let factored = (-z[k] + lse) * lse;
    let (p1, e1) = two_prod(-z[k], lse);
    let (p2, e2) = two_prod(lse, lse);
    let (s, t) = two_sum(p1, p2);
    let expanded = s + (t + (e1 + e2));
    Ok((factored, expanded))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

// ------------------------------------------------------------ registries

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceKind {
    Ce,
    Kl,
    Ed,
}

impl GuidanceKind {
    pub const ALL: [GuidanceKind; 3] = [Self::Ce, Self::Kl, Self::Ed];

    pub fn name(self) -> &'static str {
        self.strategy().name()
    }

    pub fn strategy(self) -> &'static dyn Guidance {
        match self {
            Self::Ce => &CeGuidance,
            Self::Kl => &KlGuidance,
            Self::Ed => &EdGuidance,
        }
    }
}

impl std::str::FromStr for GuidanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let g = guidance(s)?;
        Ok(Self::ALL.into_iter().find(|k| k.name() == g.name()).expect("registry and enum agree"))
    }
}

impl std::fmt::Display for GuidanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A comparison between the prior and the model's prediction.
pub trait Guidance: Named + Sync {
    fn compute(&self, prior: &[f64], predicted: &[f64]) -> Result<f64>;
}

pub struct CeGuidance;
pub struct KlGuidance;
pub struct EdGuidance;

impl Named for CeGuidance {
    fn name(&self) -> &'static str {
        "ce"
    }
}

impl Guidance for CeGuidance {
    /// Uses only the predicted class (argmax of `predicted`).
    fn compute(&self, prior: &[f64], predicted: &[f64]) -> Result<f64> {
        check_same_k(prior, predicted)?;
        guidance_ce(prior, argmax(predicted))
    }
}

impl Named for KlGuidance {
    fn name(&self) -> &'static str {
        "kl"
    }
}

impl Guidance for KlGuidance {
    fn compute(&self, prior: &[f64], predicted: &[f64]) -> Result<f64> {
        guidance_kl(prior, predicted)
    }
}

impl Named for EdGuidance {
    fn name(&self) -> &'static str {
        "ed"
    }
}

impl Guidance for EdGuidance {
    fn compute(&self, prior: &[f64], predicted: &[f64]) -> Result<f64> {
        guidance_ed(prior, predicted)
    }
}

static GUIDANCES: [&dyn Guidance; 3] = [&CeGuidance, &KlGuidance, &EdGuidance];

pub fn guidance(name: &str) -> Result<&'static dyn Guidance> {
    registry::lookup(&GUIDANCES, "guidance", name)
}

pub fn guidance_names() -> Vec<&'static str> {
    registry::names(&GUIDANCES)
}

/// A logit-only baseline score, oriented higher = ID.
pub trait Baseline: Named + Sync {
    fn score(&self, logits: &[f64]) -> Result<f64>;
}

pub struct Msp;
pub struct MaxLogit;
/// Negative energy.
pub struct Energy;

impl Named for Msp {
    fn name(&self) -> &'static str {
        "msp"
    }
}

impl Baseline for Msp {
    fn score(&self, logits: &[f64]) -> Result<f64> {
        msp(logits)
    }
}

impl Named for MaxLogit {
    fn name(&self) -> &'static str {
        "max_logit"
    }
}

impl Baseline for MaxLogit {
    fn score(&self, logits: &[f64]) -> Result<f64> {
        max_logit(logits)
    }
}

impl Named for Energy {
    fn name(&self) -> &'static str {
        "energy"
    }
}

impl Baseline for Energy {
    fn score(&self, logits: &[f64]) -> Result<f64> {
        Ok(-energy(logits)?)
    }
}

static BASELINES: [&dyn Baseline; 3] = [&Msp, &MaxLogit, &Energy];

pub fn baselines() -> &'static [&'static dyn Baseline] {
    &BASELINES
}

pub fn baseline(name: &str) -> Result<&'static dyn Baseline> {
    registry::lookup(&BASELINES, "baseline", name)
}

// -------------------------------------------------------- decision rule

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    #[default]
    AsIs,
    Negated,
}

impl Orientation {
    pub fn apply(self, score: f64) -> f64 {
        match self {
            Self::AsIs => score,
            Self::Negated => -score,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AsIs => "as-is",
            Self::Negated => "negated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Decision {
    Id,
    Ood,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRule {
    pub threshold: f64,
    pub orientation: Orientation,
}

/// Oriented score ≥ γ is ID.
pub fn decide(score: f64, rule: &DecisionRule) -> Decision {
    if rule.orientation.apply(score) >= rule.threshold {
        Decision::Id
    } else {
        Decision::Ood
    }
}

// -------------------------------------------------------- dataset scoring

/// Produces the logits being judged. The prior is passed for models that
/// consume it; a fixed logits table ignores it.
pub trait Predictor: Sync {
    fn predicted_logits(&self, dataset: &Dataset, index: usize, prior: &[f64]) -> Result<Vec<f64>>;
}

impl Predictor for PViTModel {
    fn predicted_logits(&self, dataset: &Dataset, index: usize, prior: &[f64]) -> Result<Vec<f64>> {
        self.logits(&dataset.images[index], prior)
    }
}

impl Predictor for LogitsTable {
    fn predicted_logits(&self, dataset: &Dataset, index: usize, _prior: &[f64]) -> Result<Vec<f64>> {
        self.logits_for(&dataset.ids[index]).map(<[f64]>::to_vec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub label: Option<usize>,
    pub base: f64,
    pub guidance: f64,
    pub pge: f64,
    pub predicted_class: usize,
    pub baselines: BTreeMap<String, f64>,
}

impl ScoreRecord {
    pub fn from_logits(id: String, label: Option<usize>, prior: &[f64], predicted: &[f64], kind: GuidanceKind) -> Result<Self> {
        let base = base_score(predicted)?;
        let guidance = kind.strategy().compute(prior, predicted)?;
        let baselines = BASELINES
            .iter()
            .map(|b| Ok((b.name().to_string(), b.score(predicted)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            id,
            label,
            base,
            guidance,
            pge: pge(base, guidance),
            predicted_class: argmax(predicted),
            baselines,
        })
    }

    /// Names accepted by [`ScoreRecord::field`].
    pub fn field_names() -> Vec<&'static str> {
        let mut v = vec!["base", "guidance", "pge"];
        v.extend(BASELINES.iter().map(|b| b.name()));
        v
    }

    pub fn field(&self, name: &str) -> Result<f64> {
        match name {
            "base" => Ok(self.base),
            "guidance" => Ok(self.guidance),
            "pge" => Ok(self.pge),
            other => self.baselines.get(other).copied().ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown score field `{other}` (known: {})",
                    Self::field_names().join(", ")
                ))
            }),
        }
    }
}

/// Scores every sample of `dataset`, in dataset order. Samples are spread
/// over the available cores; output order does not depend on scheduling.
pub fn score_dataset(
    predictor: &dyn Predictor,
    prior: &dyn PriorProvider,
    dataset: &Dataset,
    kind: GuidanceKind,
) -> Result<Vec<ScoreRecord>> {
    let one = |i: usize| -> Result<ScoreRecord> {
        let p = prior.prior_logits(dataset, i)?;
        let z = predictor.predicted_logits(dataset, i, &p)?;
        ScoreRecord::from_logits(dataset.ids[i].clone(), dataset.label(i), &p, &z, kind)
    };
    let n = dataset.len();
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(one).collect();
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<Result<Vec<ScoreRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let one = &one;
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(one).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Pairs two logits tables by id, with no model involved: `predicted` is
/// scored against `prior`, in `predicted`'s record order.
pub fn score_tables(predicted: &LogitsTable, prior: &LogitsTable, kind: GuidanceKind) -> Result<Vec<ScoreRecord>> {
    predicted
        .records()
        .iter()
        .map(|r| {
            let p = prior.logits_for(&r.id)?;
            ScoreRecord::from_logits(r.id.clone(), r.label, p, &r.logits, kind)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHeader {
    pub guidance: GuidanceKind,
    pub alpha: Option<f64>,
    pub checkpoint_hash: Option<String>,
    pub dataset: String,
}

pub fn write_scores(path: &Path, header: &ScoreHeader, records: &[ScoreRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    emit(serde_json::to_string(header).expect("header serializes"))?;
    for r in records {
        emit(serde_json::to_string(r).expect("record serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_scores(path: &Path) -> Result<(ScoreHeader, Vec<ScoreRecord>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let at = |line: usize, msg: String| Error::Format(format!("{}: line {line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty score file", path.display())))?;
    let header: ScoreHeader = serde_json::from_str(first).map_err(|e| at(1, format!("bad header: {e}")))?;
    let records = lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| at(n, e.to_string())))
        .collect::<Result<_>>()?;
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn energy_examples() {
        assert!(close(energy(&[0.0; 4]).unwrap(), -(4f64).ln(), 1e-15));
        assert_eq!(energy(&[2.5]).unwrap(), -2.5);
        let z = [0.3, -1.0, 2.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 7.0).collect();
        assert!(close(energy(&shifted).unwrap(), energy(&z).unwrap() - 7.0, 1e-12));
        assert!(energy(&[f64::NAN]).is_err());
    }

    #[test]
    fn base_score_examples() {
        assert!(close(base_score(&[0.0, 0.0]).unwrap(), 2f64.ln(), 1e-15));
        let a = base_score(&[0.1, 0.2, 0.3]).unwrap();
        let b = base_score(&[0.1, 0.25, 0.3]).unwrap();
        assert!(b > a);
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(msp(&[0.0, 0.0]).unwrap(), 0.5);
        assert!(msp(&[100.0, 0.0]).unwrap() >= 1.0 - 1e-15);
        assert_eq!(max_logit(&[1.0, 3.0, 2.0]).unwrap(), 3.0);
        assert_eq!(max_logit(&[1.5, 3.5, 2.5]).unwrap(), 3.5);
        assert!(close(msp(&[1.0, 3.0, 2.0]).unwrap(), msp(&[11.0, 13.0, 12.0]).unwrap(), 1e-15));
    }

    #[test]
    fn ce_examples() {
        assert!(close(guidance_ce(&[0.0; 4], 2).unwrap(), 4f64.ln(), 1e-15));
        assert!(guidance_ce(&[100.0, 0.0, 0.0], 0).unwrap() < 1e-40);
        assert!(close(guidance_ce(&[100.0, 0.0], 1).unwrap(), -(1e-12f64).ln(), 1e-12));
        assert!(guidance_ce(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn kl_ed_examples() {
        assert_eq!(guidance_kl(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(guidance_kl(&[1.0, 2.0], &[1.0]).is_err());
        assert_eq!(guidance_ed(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(guidance_ed(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert_eq!(guidance_ed(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn pge_examples() {
        assert_eq!(pge(2.0, 3.0), 6.0);
        assert_eq!(pge(-5.0, 0.0), 0.0);
        assert!(pge(-2.0, 3.0) < 0.0);
    }

    #[test]
    fn cefe_zero_logits() {
        let (f, e) = cefe_expand(&[0.0, 0.0], 0).unwrap();
        let l2 = 2f64.ln().powi(2);
        assert!(close(f, l2, 1e-15) && close(e, l2, 1e-15));
        assert!(cefe_expand(&[0.0], 1).is_err());
    }

    #[test]
    fn cefe_dominant_class() {
        // The expanded terms are ~400 each and cancel to ~4e-8.
        let (f, e) = cefe_expand(&[20.0, 0.0], 0).unwrap();
        assert!(f > 0.0 && f < 1e-7);
        assert!((f - e).abs() <= 1e-14 * f);
    }

    #[test]
    fn decision_rule() {
        let rule = DecisionRule { threshold: 1.5, orientation: Orientation::AsIs };
        assert_eq!(decide(1.5, &rule), Decision::Id);
        assert_eq!(decide(1.5 - 1e-9, &rule), Decision::Ood);
        let neg = DecisionRule { orientation: Orientation::Negated, ..rule };
        assert_eq!(decide(-1.5, &neg), Decision::Id);
    }

    #[test]
    fn registries() {
        assert_eq!(guidance_names(), vec!["ce", "kl", "ed"]);
        assert_eq!("kl".parse::<GuidanceKind>().unwrap(), GuidanceKind::Kl);
        let err = "cosine".parse::<GuidanceKind>().unwrap_err().to_string();
        assert!(err.contains("ce, kl, ed"), "{err}");
        assert_eq!(baseline("energy").unwrap().score(&[0.0, 0.0]).unwrap(), 2f64.ln());
    }

    #[test]
    fn record_fields() {
        let r = ScoreRecord::from_logits("x".into(), None, &[1.0, 2.0], &[1.0, 2.0], GuidanceKind::Ed).unwrap();
        assert_eq!(r.pge, 0.0);
        assert_eq!(r.field("pge").unwrap(), r.base * r.guidance);
        assert_eq!(r.field("msp").unwrap(), msp(&[1.0, 2.0]).unwrap());
        assert!(r.field("nope").is_err());
        assert_eq!(r.predicted_class, 1);
    }

    #[test]
    fn score_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let header = ScoreHeader { guidance: GuidanceKind::Ce, alpha: Some(0.1), checkpoint_hash: None, dataset: "d".into() };
        let recs = vec![
            ScoreRecord::from_logits("a".into(), Some(0), &[0.3, 0.1], &[2.0, -1.0], GuidanceKind::Ce).unwrap(),
            ScoreRecord::from_logits("b".into(), None, &[-0.3, 0.1], &[0.0, 1.0 / 3.0], GuidanceKind::Ce).unwrap(),
        ];
        write_scores(&p, &header, &recs).unwrap();
        let (h, r) = load_scores(&p).unwrap();
        assert_eq!((h, r), (header, recs));
    }
}

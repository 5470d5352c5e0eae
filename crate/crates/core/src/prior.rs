//! Prior logits: from an in-repo classifier or from an external logits file.
//!
//! Logits files are JSON Lines. The first line is a header
//! `{"k": K, "dataset": "...", "model": "..."}`; every following line is a
//! record `{"id": "...", "label": int|null, "logits": [K numbers]}`. Logits
//! are raw (pre-softmax).

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mlp::{MlpClassifier, MlpConfig};
use crate::tensor::softmax;
use crate::train::{self, Network, Sample, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitsRecord {
    pub id: String,
    pub label: Option<usize>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitsHeader {
    pub k: usize,
    pub dataset: String,
    pub model: String,
}

/// Logits keyed by sample id. Immutable once loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsTable {
    header: LogitsHeader,
    records: Vec<LogitsRecord>,
    index: HashMap<String, usize>,
}

impl LogitsTable {
    pub fn new(header: LogitsHeader) -> Self {
        Self { header, records: Vec::new(), index: HashMap::new() }
    }

    pub fn header(&self) -> &LogitsHeader {
        &self.header
    }

    pub fn records(&self) -> &[LogitsRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: LogitsRecord) -> Result<()> {
        if record.logits.len() != self.header.k {
            return Err(Error::Format(format!(
                "record `{}` has {} logits, header declares k = {}",
                record.id,
                record.logits.len(),
                self.header.k
            )));
        }
        if record.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("record `{}` has non-finite logits", record.id)));
        }
        if self.index.contains_key(&record.id) {
            return Err(Error::Format(format!("duplicate id `{}`", record.id)));
        }
        self.index.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&LogitsRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    /// Looks up `id`, failing with a missing-prior error.
    pub fn logits_for(&self, id: &str) -> Result<&[f64]> {
        self.get(id)
            .map(|r| r.logits.as_slice())
            .ok_or_else(|| Error::MissingPrior(format!("no logits for id `{id}` in `{}`", self.header.dataset)))
    }

    /// Union of several tables with the same K; ids must stay unique.
    pub fn merge(tables: &[LogitsTable], dataset: &str) -> Result<Self> {
        let first = tables.first().ok_or_else(|| Error::Invalid("nothing to merge".into()))?;
        let mut out = Self::new(LogitsHeader {
            k: first.header.k,
            dataset: dataset.to_string(),
            model: first.header.model.clone(),
        });
        for t in tables {
            for r in &t.records {
                out.push(r.clone())?;
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
        emit(serde_json::to_string(&self.header).expect("header serializes"))?;
        for r in &self.records {
            emit(serde_json::to_string(r).expect("record serializes"))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Parses a logits file. Errors carry the path and 1-based line number.
pub fn load_logits(path: &Path) -> Result<LogitsTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let at = |line: usize, msg: String| Error::Format(format!("{}: line {line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file, expected a header line", path.display())))?;
    let header: LogitsHeader = serde_json::from_str(first).map_err(|e| at(1, format!("bad header: {e}")))?;
    let mut table = LogitsTable::new(header);
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogitsRecord = serde_json::from_str(line).map_err(|e| at(n, e.to_string()))?;
        let mass: f64 = softmax(&rec.logits).iter().sum();
        table.push(rec).map_err(|e| at(n, e.to_string()))?;
        if (mass - 1.0).abs() > 1e-12 {
            return Err(at(n, format!("softmax of logits sums to {mass}")));
        }
    }
    Ok(table)
}

/// Something that yields raw prior logits for a dataset sample.
pub trait PriorProvider: Sync {
    fn num_classes(&self) -> usize;

    fn prior_logits(&self, dataset: &Dataset, index: usize) -> Result<Vec<f64>>;

    /// Short tag written into exported files.
    fn describe(&self) -> String;

    fn prior_logits_all(&self, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
        (0..dataset.len()).map(|i| self.prior_logits(dataset, i)).collect()
    }
}

impl PriorProvider for LogitsTable {
    fn num_classes(&self) -> usize {
        self.header.k
    }

    fn prior_logits(&self, dataset: &Dataset, index: usize) -> Result<Vec<f64>> {
        let id = dataset
            .ids
            .get(index)
            .ok_or_else(|| Error::Index(format!("sample {index} outside dataset `{}`", dataset.name)))?;
        self.logits_for(id).map(<[f64]>::to_vec)
    }

    fn describe(&self) -> String {
        format!("table:{}", self.header.model)
    }
}

impl PriorProvider for MlpClassifier {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn prior_logits(&self, dataset: &Dataset, index: usize) -> Result<Vec<f64>> {
        let px = dataset
            .images
            .get(index)
            .ok_or_else(|| Error::Index(format!("sample {index} outside dataset `{}`", dataset.name)))?;
        self.logits(px)
    }

    fn describe(&self) -> String {
        format!("mlp-{}", self.config().hidden)
    }

    fn prior_logits_all(&self, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
        let samples: Vec<Sample<'_>> = dataset.images.iter().map(|p| Sample { pixels: p, prior: &[] }).collect();
        train::predict(self, &samples, 128)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSourceKind {
    Model,
    Table,
}

impl std::str::FromStr for PriorSourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Self::Model),
            "table" => Ok(Self::Table),
            _ => Err(Error::Invalid(format!("unknown prior source `{s}` (known: model, table)"))),
        }
    }
}

/// Either kind of prior, interchangeable wherever priors are consumed.
#[derive(Clone, Debug)]
pub enum PriorSource {
    Model(MlpClassifier),
    Table(LogitsTable),
}

impl PriorSource {
    pub fn kind(&self) -> PriorSourceKind {
        match self {
            Self::Model(_) => PriorSourceKind::Model,
            Self::Table(_) => PriorSourceKind::Table,
        }
    }

    fn inner(&self) -> &dyn PriorProvider {
        match self {
            Self::Model(m) => m,
            Self::Table(t) => t,
        }
    }
}

impl PriorProvider for PriorSource {
    fn num_classes(&self) -> usize {
        self.inner().num_classes()
    }

    fn prior_logits(&self, dataset: &Dataset, index: usize) -> Result<Vec<f64>> {
        self.inner().prior_logits(dataset, index)
    }

    fn describe(&self) -> String {
        self.inner().describe()
    }

    fn prior_logits_all(&self, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
        self.inner().prior_logits_all(dataset)
    }
}

/// Runs `source` over `dataset` and collects the result as a table.
pub fn export_table(source: &dyn PriorProvider, dataset: &Dataset) -> Result<LogitsTable> {
    let all = source.prior_logits_all(dataset)?;
    let mut table = LogitsTable::new(LogitsHeader {
        k: source.num_classes(),
        dataset: dataset.name.clone(),
        model: source.describe(),
    });
    for (i, logits) in all.into_iter().enumerate() {
        table.push(LogitsRecord { id: dataset.ids[i].clone(), label: dataset.label(i), logits })?;
    }
    Ok(table)
}

pub fn export_logits(source: &dyn PriorProvider, dataset: &Dataset, path: &Path) -> Result<LogitsTable> {
    let table = export_table(source, dataset)?;
    table.write(path)?;
    Ok(table)
}

pub struct TrainedPrior {
    pub model: MlpClassifier,
    pub report: TrainReport,
    pub train_accuracy: f64,
}

/// Fits the default prior: a two-layer MLP over flattened pixels.
/// Weights are initialized from `cfg.seed`.
pub fn train_prior_model(train_set: &Dataset, hidden: usize, cfg: &TrainConfig) -> Result<TrainedPrior> {
    if train_set.is_empty() {
        return Err(Error::Invalid(format!("training set `{}` is empty", train_set.name)));
    }
    let labels = train_set
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("training set `{}` has no labels", train_set.name)))?;
    let k = train_set.num_classes().unwrap_or(0).max(2);
    let mut model = MlpClassifier::new(MlpConfig { input_dim: train_set.pixels(), hidden, num_classes: k }, cfg.seed)?;
    let samples: Vec<Sample<'_>> = train_set.images.iter().map(|p| Sample { pixels: p, prior: &[] }).collect();
    let report = if cfg.epochs == 0 {
        train::TrainReport { curve: Vec::new(), epochs: Vec::new(), state: train::OptimizerState::new(model.params()) }
    } else {
        train::train(&mut model, &samples, labels, cfg, None, &mut |_| {})?
    };
    let train_accuracy = train::accuracy(&model, &samples, labels)?;
    Ok(TrainedPrior { model, report, train_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};

    fn table() -> LogitsTable {
        let mut t = LogitsTable::new(LogitsHeader { k: 3, dataset: "d".into(), model: "m".into() });
        t.push(LogitsRecord { id: "a".into(), label: Some(1), logits: vec![0.1, -2.0, 1.0 / 3.0] }).unwrap();
        t.push(LogitsRecord { id: "b".into(), label: None, logits: vec![1e-300, 5e10, -7.25] }).unwrap();
        t
    }

    #[test]
    fn table_lookup() {
        let t = table();
        assert_eq!(t.logits_for("a").unwrap(), &[0.1, -2.0, 1.0 / 3.0]);
        assert!(matches!(t.logits_for("zzz"), Err(Error::MissingPrior(_))));
    }

    #[test]
    fn push_rejects_bad_records() {
        let mut t = table();
        let dup = LogitsRecord { id: "a".into(), label: None, logits: vec![0.0; 3] };
        assert!(matches!(t.push(dup), Err(Error::Format(_))));
        let short = LogitsRecord { id: "c".into(), label: None, logits: vec![0.0; 2] };
        assert!(matches!(t.push(short), Err(Error::Format(_))));
        let nan = LogitsRecord { id: "d".into(), label: None, logits: vec![f64::NAN, 0.0, 0.0] };
        assert!(t.push(nan).is_err());
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.jsonl");
        let t = table();
        t.write(&p).unwrap();
        assert_eq!(load_logits(&p).unwrap(), t);
    }

    #[test]
    fn header_only_file_is_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.jsonl");
        fs::write(&p, "{\"k\":4,\"dataset\":\"x\",\"model\":\"y\"}\n").unwrap();
        let t = load_logits(&p).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.header().k, 4);
    }

    #[test]
    fn short_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.jsonl");
        fs::write(
            &p,
            "{\"k\":3,\"dataset\":\"x\",\"model\":\"y\"}\n\
             {\"id\":\"a\",\"label\":0,\"logits\":[1,2,3]}\n\
             {\"id\":\"b\",\"label\":0,\"logits\":[1,2]}\n",
        )
        .unwrap();
        let msg = load_logits(&p).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn model_source_is_deterministic() {
        let ds = synth_dataset(&SynthSpec::new(3, 2, 0.1, 5)).unwrap();
        let m = MlpClassifier::new(MlpConfig { input_dim: 784, hidden: 8, num_classes: 3 }, 1).unwrap();
        let a = m.prior_logits(&ds, 4).unwrap();
        assert_eq!(a, m.prior_logits(&ds, 4).unwrap());
        let all = m.prior_logits_all(&ds).unwrap();
        for (x, y) in all[4].iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_source_dispatch() {
        let ds = synth_dataset(&SynthSpec::new(3, 1, 0.0, 5)).unwrap();
        let m = MlpClassifier::new(MlpConfig { input_dim: 784, hidden: 4, num_classes: 3 }, 1).unwrap();
        let t = export_table(&m, &ds).unwrap();
        let src = PriorSource::Table(t);
        assert_eq!(src.kind(), PriorSourceKind::Table);
        assert_eq!(src.prior_logits(&ds, 2).unwrap(), m.prior_logits_all(&ds).unwrap()[2]);
        assert!("graph".parse::<PriorSourceKind>().is_err());
    }

    #[test]
    fn empty_train_set_rejected() {
        let mut ds = synth_dataset(&SynthSpec::new(2, 1, 0.0, 5)).unwrap();
        ds.images.clear();
        ds.ids.clear();
        ds.labels = Some(vec![]);
        assert!(train_prior_model(&ds, 4, &TrainConfig::default()).is_err());
    }
}

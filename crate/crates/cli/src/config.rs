//! `key = value` run configuration.
//!
//! Every recognised key has a default; unknown keys are rejected. The fully
//! resolved table is written next to each command's outputs so the run can
//! be repeated from that file alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// (key, default, description). An empty default means "unset".
const KEYS: &[(&str, &str, &str)] = &[
    ("out", "runs/default", "output directory"),
    ("seed", "0", "weight init and batch order for both models"),
    ("data.source", "synth", "synth | idx"),
    ("data.train_images", "", "IDX images for ID-train (data.source = idx)"),
    ("data.train_labels", "", "IDX labels for ID-train"),
    ("data.test_images", "", "IDX images for ID-test"),
    ("data.test_labels", "", "IDX labels for ID-test"),
    ("data.test_per_class", "100", "held-out images per class (synth)"),
    ("data.split_seed", "0", "seed of the stratified split (synth)"),
    ("data.normalize_mean", "0.5", "per-channel mean, comma separated"),
    ("data.normalize_std", "0.5", "per-channel std, comma separated"),
    ("synth.classes", "4", ""),
    ("synth.per_class", "600", ""),
    ("synth.pattern", "stripes", "stripes | blobs"),
    ("synth.noise", "0.8", "Gaussian pixel noise sigma"),
    ("synth.seed", "1", ""),
    ("synth.height", "28", ""),
    ("synth.width", "28", ""),
    ("ood.sets", "uniform-noise,pattern-shift", "OOD generators, comma separated"),
    ("ood.n", "400", "images per OOD set"),
    ("ood.seed", "2", ""),
    ("ood.noise", "", "pixel noise for pattern OOD sets; defaults to synth.noise"),
    ("model.patch_size", "7", ""),
    ("model.embed_dim", "64", ""),
    ("model.depth", "4", ""),
    ("model.heads", "4", ""),
    ("model.mlp_dim", "128", ""),
    ("model.alpha", "0.1", "prior-token scale"),
    ("model.prior_broadcast", "sample", "sample | batch"),
    ("train.epochs", "10", ""),
    ("train.batch_size", "32", ""),
    ("train.lr", "3e-4", ""),
    ("train.warmup_epochs", "1", ""),
    ("train.beta1", "0.9", ""),
    ("train.beta2", "0.999", ""),
    ("train.weight_decay", "1e-3", ""),
    ("train.resume", "false", "continue from <out>/pvit if a state file exists"),
    ("prior.source", "model", "model | table"),
    ("prior.checkpoint", "", "prior model checkpoint; defaults to <out>/prior/model.ckpt"),
    ("prior.logits_dir", "", "logits tables; defaults to <out>/logits"),
    ("prior.hidden", "64", "MLP hidden width"),
    ("prior.epochs", "10", ""),
    ("prior.batch_size", "32", ""),
    ("prior.lr", "1e-3", ""),
    ("prior.warmup_epochs", "1", ""),
    ("prior.weight_decay", "1e-3", ""),
    ("score.guidance", "ce,kl,ed", "guidance kinds, comma separated"),
    ("score.predictor", "pvit", "pvit | table"),
    ("score.predicted_logits_dir", "", "logits tables scored in place of the model (score.predictor = table)"),
    ("eval.orientation", "auto", "as-is | negated | auto"),
    ("eval.fields", "pge,base,guidance,msp,max_logit,energy", ""),
    ("eval.bins", "30", ""),
    ("eval.tpr", "0.95", ""),
    ("attention.split", "id-test", "split whose samples are dumped"),
    ("attention.layer", "", "defaults to the last layer"),
    ("attention.head", "0", ""),
    ("attention.limit", "8", "samples dumped"),
    ("attention.alphas", "", "alphas to evaluate; defaults to model.alpha"),
    ("export.source", "prior", "prior | pvit"),
    ("export.dir", "", "defaults to <out>/logits (prior) or <out>/pvit-logits (pvit)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
    }

    /// The resolved table in `key = value` form.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, _, doc) in KEYS {
            let v = &self.values[*k];
            if doc.is_empty() {
                writeln!(s, "{k} = {v}").expect("string write");
            } else {
                writeln!(s, "{k} = {v}  # {doc}").expect("string write");
            }
        }
        s
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared config key {key}"))
    }

    pub fn opt_str(&self, key: &str) -> Option<&str> {
        Some(self.str(key)).filter(|s| !s.is_empty())
    }

    /// A required value; the error names the key.
    pub fn required(&self, key: &str) -> Result<&str, CliError> {
        self.opt_str(key).ok_or_else(|| CliError::Usage(format!("config key `{key}` is required")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.required(key)?;
        raw.parse().map_err(|e| CliError::Usage(format!("config key `{key}`: cannot parse `{raw}`: {e}")))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.opt_str(key) {
            None => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::Usage(format!("config key `{key}`: cannot parse `{s}`: {e}"))))
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.str("out"))
    }

    /// `key` as a path, or `default` under the output directory.
    pub fn path_or(&self, key: &str, default: &str) -> PathBuf {
        self.opt_str(key).map_or_else(|| self.out_dir().join(default), PathBuf::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_comments_and_overrides() {
        let cfg = RunConfig::parse("# header\nmodel.alpha = 0.25  # scale\n\nseed=9\n").unwrap();
        assert_eq!(cfg.get::<f64>("model.alpha").unwrap(), 0.25);
        assert_eq!(cfg.get::<u64>("seed").unwrap(), 9);
        assert_eq!(cfg.get::<usize>("train.epochs").unwrap(), 10);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("model.alhpa = 1\n").unwrap_err().to_string();
        assert!(err.contains("model.alhpa") && err.contains("line 1"), "{err}");
        assert!(RunConfig::parse("just words\n").is_err());
    }

    #[test]
    fn render_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.set("ood.sets", "inverted").unwrap();
        cfg.set("data.train_images", "/tmp/x.idx").unwrap();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn typed_getters_name_the_key() {
        let mut cfg = RunConfig::default();
        cfg.set("train.epochs", "ten").unwrap();
        let err = cfg.get::<usize>("train.epochs").unwrap_err().to_string();
        assert!(err.contains("train.epochs"), "{err}");
        let err = cfg.required("data.train_images").unwrap_err().to_string();
        assert!(err.contains("data.train_images"), "{err}");
        assert_eq!(cfg.list::<String>("ood.sets").unwrap(), vec!["uniform-noise", "pattern-shift"]);
        assert_eq!(cfg.opt::<usize>("attention.layer").unwrap(), None);
    }
}

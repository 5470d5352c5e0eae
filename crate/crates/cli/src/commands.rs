//! One function per subcommand. Each writes `<out>/<command>.config` with
//! the resolved configuration before producing its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use pvit::checkpoint::file_sha256;
use pvit::data::{
    load_idx, make_ood, normalize, split_train_test, synth_dataset, Dataset, OodSpec, PatternFamily, Role, SynthSpec,
};
use pvit::metrics::{evaluate, extract, histogram_export, OrientationPolicy};
use pvit::mlp::MlpClassifier;
use pvit::model::{PViTConfig, PViTModel, PriorBroadcast};
use pvit::prior::{export_logits, load_logits, train_prior_model, LogitsHeader, LogitsRecord, LogitsTable, PriorProvider, PriorSource, PriorSourceKind};
use pvit::scoring::{load_scores, score_dataset, score_tables, write_scores, GuidanceKind, ScoreHeader, ScoreRecord};
use pvit::train::{self, OptimizerState, Sample, TrainConfig};
use pvit::Error;

use crate::config::RunConfig;
use crate::{CliError, Command};

type Result<T> = std::result::Result<T, CliError>;

pub const ID_TRAIN: &str = "id-train";
pub const ID_TEST: &str = "id-test";

pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir();
    create_dir(&out)?;
    write_text(&out.join(format!("{}.config", command.name())), &cfg.render())?;
    match command {
        Command::TrainPrior => train_prior(cfg),
        Command::TrainPvit => train_pvit(cfg),
        Command::Score => score(cfg),
        Command::Eval => eval(cfg),
        Command::AttentionDump => attention_dump(cfg),
        Command::ExportLogits => export(cfg),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e).into())
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    if let Some(parent) = p.parent() {
        create_dir(parent)?;
    }
    fs::write(p, text).map_err(|e| Error::io(p, e).into())
}

fn write_json(p: &Path, value: &impl Serialize) -> Result<()> {
    write_text(p, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

// ----------------------------------------------------------------- data

/// ID-train, ID-test and the OOD sets, all normalized identically.
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Vec<Dataset>,
}

impl Splits {
    pub fn all(&self) -> impl Iterator<Item = &Dataset> {
        [&self.train, &self.test].into_iter().chain(&self.ood)
    }

    pub fn by_name(&self, name: &str) -> Result<&Dataset> {
        self.all().find(|d| d.name == name).ok_or_else(|| {
            let known: Vec<_> = self.all().map(|d| d.name.as_str()).collect();
            CliError::Usage(format!("unknown split `{name}` (known: {})", known.join(", ")))
        })
    }
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let (train, test) = match cfg.str("data.source") {
        "synth" => {
            let spec = SynthSpec {
                classes: cfg.get("synth.classes")?,
                per_class: cfg.get("synth.per_class")?,
                pattern: cfg.get::<PatternFamily>("synth.pattern")?,
                noise: cfg.get("synth.noise")?,
                seed: cfg.get("synth.seed")?,
                height: cfg.get("synth.height")?,
                width: cfg.get("synth.width")?,
            };
            let all = synth_dataset(&spec)?;
            split_train_test(&all, cfg.get("data.test_per_class")?, cfg.get("data.split_seed")?)?
        }
        "idx" => {
            let labels = |key: &str| cfg.opt_str(key).map(PathBuf::from);
            let tr_img = PathBuf::from(cfg.required("data.train_images")?);
            let te_img = PathBuf::from(cfg.required("data.test_images")?);
            let tr_lab = labels("data.train_labels")
                .ok_or_else(|| CliError::Usage("config key `data.train_labels` is required".into()))?;
            let te_lab = labels("data.test_labels");
            let train = load_idx(&tr_img, Some(&tr_lab))?.with_name(ID_TRAIN, Role::IdTrain);
            let test = load_idx(&te_img, te_lab.as_deref())?.with_name(ID_TEST, Role::IdTest);
            (train, test)
        }
        other => return Err(CliError::Usage(format!("config key `data.source`: unknown source `{other}` (known: synth, idx)"))),
    };
    let ood_noise = match cfg.opt::<f64>("ood.noise")? {
        Some(n) => n,
        None => cfg.get("synth.noise")?,
    };
    let ood_seed: u64 = cfg.get("ood.seed")?;
    let mut ood = Vec::new();
    for (i, kind) in cfg.list::<String>("ood.sets")?.iter().enumerate() {
        let spec = OodSpec { n: cfg.get("ood.n")?, seed: ood_seed.wrapping_add(i as u64), noise: ood_noise };
        ood.push(make_ood(kind, &spec, &test).map_err(|e| CliError::Usage(format!("config key `ood.sets`: {e}")))?);
    }
    let mean: Vec<f64> = cfg.list("data.normalize_mean")?;
    let std: Vec<f64> = cfg.list("data.normalize_std")?;
    let norm = |d: &Dataset| normalize(d, &mean, &std);
    Ok(Splits { train: norm(&train)?, test: norm(&test)?, ood: ood.iter().map(norm).collect::<pvit::Result<_>>()? })
}

fn samples<'a>(ds: &'a Dataset, priors: &'a [Vec<f64>]) -> Vec<Sample<'a>> {
    ds.images.iter().zip(priors).map(|(p, q)| Sample { pixels: p, prior: q }).collect()
}

fn labels(ds: &Dataset) -> Result<&[usize]> {
    ds.labels
        .as_deref()
        .ok_or_else(|| Error::Format(format!("dataset `{}` has no labels", ds.name)).into())
}

// --------------------------------------------------------------- priors

fn prior_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.path_or("prior.checkpoint", "prior/model.ckpt")
}

fn logits_dir(cfg: &RunConfig) -> PathBuf {
    cfg.path_or("prior.logits_dir", "logits")
}

/// Every `*.jsonl` table in `dir`, merged.
pub fn load_table_dir(dir: &Path) -> Result<LogitsTable> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format(format!("{}: no .jsonl logits files", dir.display())).into());
    }
    let tables = files.iter().map(|p| load_logits(p)).collect::<pvit::Result<Vec<_>>>()?;
    Ok(LogitsTable::merge(&tables, &dir.display().to_string())?)
}

pub fn prior_source(cfg: &RunConfig) -> Result<PriorSource> {
    Ok(match cfg.get::<PriorSourceKind>("prior.source")? {
        PriorSourceKind::Model => PriorSource::Model(MlpClassifier::load(&prior_checkpoint(cfg))?),
        PriorSourceKind::Table => PriorSource::Table(load_table_dir(&logits_dir(cfg))?),
    })
}

fn prior_train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: cfg.get("prior.epochs")?,
        batch_size: cfg.get("prior.batch_size")?,
        base_lr: cfg.get("prior.lr")?,
        warmup_epochs: cfg.get("prior.warmup_epochs")?,
        beta1: cfg.get("train.beta1")?,
        beta2: cfg.get("train.beta2")?,
        weight_decay: cfg.get("prior.weight_decay")?,
        seed: cfg.get("seed")?,
    })
}

#[derive(Serialize)]
struct PriorReport {
    train_accuracy: f64,
    test_accuracy: f64,
    epochs: usize,
    steps: usize,
}

fn train_prior(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let tcfg = prior_train_config(cfg)?;
    let trained = train_prior_model(&splits.train, cfg.get("prior.hidden")?, &tcfg)?;
    let test_samples: Vec<Sample<'_>> = splits.test.images.iter().map(|p| Sample { pixels: p, prior: &[] }).collect();
    let test_accuracy = train::accuracy(&trained.model, &test_samples, labels(&splits.test)?)?;

    let dir = cfg.out_dir().join("prior");
    create_dir(&dir)?;
    trained.model.save(&dir.join("model.ckpt"))?;
    write_text(&dir.join("loss.csv"), &train::loss_csv(&trained.report.curve))?;
    let report = PriorReport {
        train_accuracy: trained.train_accuracy,
        test_accuracy,
        epochs: tcfg.epochs,
        steps: trained.report.curve.len(),
    };
    write_json(&dir.join("report.json"), &report)?;

    let ldir = logits_dir(cfg);
    create_dir(&ldir)?;
    for ds in splits.all() {
        export_logits(&trained.model, ds, &ldir.join(format!("{}.jsonl", ds.name)))?;
    }
    println!(
        "prior: train accuracy {:.4}, test accuracy {:.4}; logits in {}",
        report.train_accuracy,
        report.test_accuracy,
        ldir.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- PViT

fn pvit_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join("pvit")
}

fn model_config(cfg: &RunConfig, ds: &Dataset, k: usize) -> Result<PViTConfig> {
    Ok(PViTConfig {
        image_h: ds.height,
        image_w: ds.width,
        channels: ds.channels,
        patch_size: cfg.get("model.patch_size")?,
        embed_dim: cfg.get("model.embed_dim")?,
        depth: cfg.get("model.depth")?,
        heads: cfg.get("model.heads")?,
        mlp_dim: cfg.get("model.mlp_dim")?,
        num_classes: k,
        alpha: cfg.get("model.alpha")?,
        prior_broadcast: cfg.get::<PriorBroadcast>("model.prior_broadcast")?,
    })
}

fn pvit_train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: cfg.get("train.epochs")?,
        batch_size: cfg.get("train.batch_size")?,
        base_lr: cfg.get("train.lr")?,
        warmup_epochs: cfg.get("train.warmup_epochs")?,
        beta1: cfg.get("train.beta1")?,
        beta2: cfg.get("train.beta2")?,
        weight_decay: cfg.get("train.weight_decay")?,
        seed: cfg.get("seed")?,
    })
}

#[derive(Serialize)]
struct PvitReport {
    alpha: f64,
    train_accuracy: f64,
    test_accuracy: f64,
    epochs_done: usize,
    steps: u64,
}

fn train_pvit(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let prior = prior_source(cfg)?;
    let k = prior.num_classes();
    let train_labels = labels(&splits.train)?;
    if let Some(bad) = train_labels.iter().find(|&&l| l >= k) {
        return Err(Error::Format(format!("training label {bad} but the prior has K = {k}")).into());
    }
    let train_priors = prior.prior_logits_all(&splits.train)?;
    let test_priors = prior.prior_logits_all(&splits.test)?;
    let mcfg = model_config(cfg, &splits.train, k)?;
    let tcfg = pvit_train_config(cfg)?;

    let dir = pvit_dir(cfg);
    create_dir(&dir)?;
    let (ckpt, state_path, loss_path) = (dir.join("model.ckpt"), dir.join("optimizer.state"), dir.join("loss.csv"));
    let resume = cfg.get::<bool>("train.resume")? && state_path.exists();
    let (mut model, state, mut csv) = if resume {
        let model = PViTModel::load(&ckpt)?;
        if model.config() != &mcfg {
            return Err(CliError::Usage(format!("{}: model config differs from the run config", ckpt.display())));
        }
        let state = OptimizerState::load(&state_path, train::Network::params(&model))?;
        let csv = fs::read_to_string(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
        (model, Some(state), csv)
    } else {
        (PViTModel::new(mcfg, cfg.get("seed")?)?, None, train::loss_csv(&[]))
    };

    let train_samples = samples(&splits.train, &train_priors);
    let report = train::train(&mut model, &train_samples, train_labels, &tcfg, state, &mut |e| {
        println!("epoch {:>3}: loss {:.5}, accuracy {:.4}", e.epoch + 1, e.mean_loss, e.accuracy);
    })?;
    let new_rows = train::loss_csv(&report.curve);
    csv.push_str(new_rows.split_once('\n').map_or("", |(_, rows)| rows));

    model.save(&ckpt)?;
    report.state.save(&state_path, train::Network::params(&model))?;
    write_text(&loss_path, &csv)?;
    let test_samples = samples(&splits.test, &test_priors);
    let summary = PvitReport {
        alpha: model.config().alpha,
        train_accuracy: train::accuracy(&model, &train_samples, train_labels)?,
        test_accuracy: train::accuracy(&model, &test_samples, labels(&splits.test)?)?,
        epochs_done: report.state.epochs_done,
        steps: report.state.step,
    };
    write_json(&dir.join("report.json"), &summary)?;
    println!(
        "pvit: alpha {}, test accuracy {:.4}, {} steps; checkpoint {}",
        summary.alpha,
        summary.test_accuracy,
        summary.steps,
        ckpt.display()
    );
    Ok(())
}

// -------------------------------------------------------------- scoring

fn scores_dir(cfg: &RunConfig, g: GuidanceKind) -> PathBuf {
    cfg.out_dir().join("scores").join(g.name())
}

fn score(cfg: &RunConfig) -> Result<()> {
    let kinds: Vec<GuidanceKind> = cfg.list("score.guidance")?;
    match cfg.str("score.predictor") {
        "pvit" => score_with_model(cfg, &kinds),
        "table" => score_with_tables(cfg, &kinds),
        other => Err(CliError::Usage(format!("config key `score.predictor`: unknown predictor `{other}` (known: pvit, table)"))),
    }
}

fn score_with_model(cfg: &RunConfig, kinds: &[GuidanceKind]) -> Result<()> {
    let splits = load_splits(cfg)?;
    let prior = prior_source(cfg)?;
    let ckpt = pvit_dir(cfg).join("model.ckpt");
    let model = PViTModel::load(&ckpt)?;
    let hash = file_sha256(&ckpt)?;
    let targets = std::iter::once(&splits.test).chain(&splits.ood);
    let targets: Vec<&Dataset> = targets.collect();
    for &g in kinds {
        create_dir(&scores_dir(cfg, g))?;
        for ds in &targets {
            let recs = score_dataset(&model, &prior, ds, g)?;
            let header = ScoreHeader {
                guidance: g,
                alpha: Some(model.config().alpha),
                checkpoint_hash: Some(hash.clone()),
                dataset: ds.name.clone(),
            };
            write_scores(&scores_dir(cfg, g).join(format!("{}.jsonl", ds.name)), &header, &recs)?;
        }
        println!("scored {} splits with {g} guidance", targets.len());
    }
    Ok(())
}

/// No-model path: every table in `score.predicted_logits_dir` (except the
/// training split) is scored against the prior tables.
fn score_with_tables(cfg: &RunConfig, kinds: &[GuidanceKind]) -> Result<()> {
    let pdir = PathBuf::from(cfg.required("score.predicted_logits_dir")?);
    let prior = match prior_source(cfg)? {
        PriorSource::Table(t) => t,
        PriorSource::Model(_) => {
            return Err(CliError::Usage("score.predictor = table needs prior.source = table".into()));
        }
    };
    let mut files: Vec<PathBuf> = fs::read_dir(&pdir)
        .map_err(|e| Error::io(&pdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .filter(|p| p.file_stem().is_some_and(|s| s != ID_TRAIN))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format(format!("{}: no .jsonl logits files", pdir.display())).into());
    }
    for &g in kinds {
        create_dir(&scores_dir(cfg, g))?;
        for f in &files {
            let predicted = load_logits(f)?;
            let split = f.file_stem().expect("filtered on stem").to_string_lossy().into_owned();
            let recs = score_tables(&predicted, &prior, g)?;
            let header = ScoreHeader { guidance: g, alpha: None, checkpoint_hash: None, dataset: split.clone() };
            write_scores(&scores_dir(cfg, g).join(format!("{split}.jsonl")), &header, &recs)?;
        }
        println!("scored {} logits tables with {g} guidance", files.len());
    }
    Ok(())
}

// ----------------------------------------------------------- evaluation

#[derive(Serialize)]
struct SummaryRow<'a> {
    guidance: &'a str,
    ood: &'a str,
    field: &'a str,
    orientation: &'static str,
    auroc: f64,
    fpr95: f64,
    auroc_as_is: f64,
    auroc_negated: f64,
    threshold: f64,
    n_id: usize,
    n_ood: usize,
}

fn read_scores(p: &Path) -> Result<Vec<ScoreRecord>> {
    Ok(load_scores(p)?.1)
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let policy: OrientationPolicy = cfg.get("eval.orientation")?;
    let fields: Vec<String> = cfg.list("eval.fields")?;
    for f in &fields {
        if !ScoreRecord::field_names().contains(&f.as_str()) {
            return Err(CliError::Usage(format!(
                "config key `eval.fields`: unknown score field `{f}` (known: {})",
                ScoreRecord::field_names().join(", ")
            )));
        }
    }
    let bins: usize = cfg.get("eval.bins")?;
    let tpr: f64 = cfg.get("eval.tpr")?;
    let eval_dir = cfg.out_dir().join("eval");
    let mut summary = String::from("guidance,ood,field,orientation,auroc,fpr95,auroc_as_is,auroc_negated,threshold,n_id,n_ood\n");
    for g in cfg.list::<GuidanceKind>("score.guidance")? {
        let sdir = scores_dir(cfg, g);
        let id = read_scores(&sdir.join(format!("{ID_TEST}.jsonl")))?;
        let mut ood_files: Vec<PathBuf> = fs::read_dir(&sdir)
            .map_err(|e| Error::io(&sdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .filter(|p| p.file_stem().is_some_and(|s| s != ID_TEST && s != ID_TRAIN))
            .collect();
        ood_files.sort();
        for f in ood_files {
            let ood_name = f.file_stem().expect("filtered on stem").to_string_lossy().into_owned();
            let ood = read_scores(&f)?;
            let dir = eval_dir.join(g.name()).join(&ood_name);
            create_dir(&dir)?;
            for field in &fields {
                let m = evaluate(&id, &ood, field, policy, tpr)?;
                write_json(&dir.join(format!("{field}.json")), &m)?;
                let (a, b) = (extract(&id, field)?, extract(&ood, field)?);
                histogram_export(&a, &b, bins, &dir.join(format!("{field}.hist.csv")))?;
                let row = SummaryRow {
                    guidance: g.name(),
                    ood: &ood_name,
                    field,
                    orientation: m.orientation.name(),
                    auroc: m.auroc,
                    fpr95: m.fpr95,
                    auroc_as_is: m.auroc_as_is,
                    auroc_negated: m.auroc_negated,
                    threshold: m.threshold,
                    n_id: m.n_id,
                    n_ood: m.n_ood,
                };
                summary.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    row.guidance,
                    row.ood,
                    row.field,
                    row.orientation,
                    row.auroc,
                    row.fpr95,
                    row.auroc_as_is,
                    row.auroc_negated,
                    row.threshold,
                    row.n_id,
                    row.n_ood
                ));
                println!(
                    "{:<3} {:<14} {:<10} auroc {:.4} ({}) fpr95 {:.4}",
                    row.guidance, row.ood, row.field, row.auroc, row.orientation, row.fpr95
                );
            }
        }
    }
    write_text(&eval_dir.join("summary.csv"), &summary)
}

// ------------------------------------------------------------ attention

fn attention_dump(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let ds = splits.by_name(cfg.str("attention.split"))?;
    let prior = prior_source(cfg)?;
    let model = PViTModel::load(&pvit_dir(cfg).join("model.ckpt"))?;
    let depth = model.config().depth;
    if depth == 0 {
        return Err(CliError::Usage("model has no encoder layers to dump".into()));
    }
    let layer = cfg.opt::<usize>("attention.layer")?.unwrap_or(depth - 1);
    let head: usize = cfg.get("attention.head")?;
    let mut alphas: Vec<f64> = cfg.list("attention.alphas")?;
    if alphas.is_empty() {
        alphas.push(model.config().alpha);
    }
    let limit = cfg.get::<usize>("attention.limit")?.min(ds.len());

    let dir = cfg.out_dir().join("attention");
    let mut mass = String::from("id,alpha,layer,head,prior_mass,predicted_class\n");
    for &alpha in &alphas {
        let adir = dir.join(format!("alpha-{alpha}"));
        create_dir(&adir)?;
        for i in 0..limit {
            let p = prior.prior_logits(ds, i)?;
            let trace = model.trace_with_alpha(&ds.images[i], &p, alpha)?;
            let map = trace
                .extract_attention(layer, head)
                .map_err(|e| CliError::Usage(format!("attention.layer / attention.head: {e}")))?;
            let (rows, cols) = map.matrix.dims2()?;
            let mut csv = String::new();
            for r in 0..rows {
                let line: Vec<String> = (0..cols).map(|c| map.matrix.get2(r, c).to_string()).collect();
                csv.push_str(&line.join(","));
                csv.push('\n');
            }
            write_text(&adir.join(format!("{}.csv", ds.ids[i])), &csv)?;
            mass.push_str(&format!(
                "{},{alpha},{layer},{head},{},{}\n",
                ds.ids[i],
                map.prior_mass,
                trace.predicted_class()
            ));
        }
    }
    write_text(&dir.join("prior_mass.csv"), &mass)?;
    println!("attention maps for {limit} samples x {} alphas in {}", alphas.len(), dir.display());
    Ok(())
}

// --------------------------------------------------------------- export

fn export(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let prior = prior_source(cfg)?;
    match cfg.str("export.source") {
        "prior" => {
            let dir = cfg.path_or("export.dir", "logits");
            create_dir(&dir)?;
            for ds in splits.all() {
                export_logits(&prior, ds, &dir.join(format!("{}.jsonl", ds.name)))?;
            }
            println!("prior logits in {}", dir.display());
        }
        "pvit" => {
            let dir = cfg.path_or("export.dir", "pvit-logits");
            create_dir(&dir)?;
            let ckpt = pvit_dir(cfg).join("model.ckpt");
            let model = PViTModel::load(&ckpt)?;
            let tag = format!("pvit:{}", &file_sha256(&ckpt)?[..12]);
            for ds in splits.all() {
                let priors = prior.prior_logits_all(ds)?;
                let logits = train::predict(&model, &samples(ds, &priors), 64)?;
                let mut table = LogitsTable::new(LogitsHeader {
                    k: model.config().num_classes,
                    dataset: ds.name.clone(),
                    model: tag.clone(),
                });
                for (i, z) in logits.into_iter().enumerate() {
                    table.push(LogitsRecord { id: ds.ids[i].clone(), label: ds.label(i), logits: z })?;
                }
                table.write(&dir.join(format!("{}.jsonl", ds.name)))?;
            }
            println!("PViT logits in {}", dir.display());
        }
        other => {
            return Err(CliError::Usage(format!("config key `export.source`: unknown source `{other}` (known: prior, pvit)")));
        }
    }
    Ok(())
}

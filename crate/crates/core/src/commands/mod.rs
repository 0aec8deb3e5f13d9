//! Pipeline stages behind the `mov` subcommands. Each stage reads a
//! [`RunConfig`], writes under one output directory and leaves a `run.json`
//! summary plus the effective config beside its artifacts.

pub mod ablate;
pub mod data;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, CONFIG_SNAPSHOT};
use crate::encoders::{EmbeddingTable, PromptSet};
use crate::error::{MovError, Result};
use crate::evaluator::{extract_features, per_class_delta, score, write_delta_csv, EvalReport, SampleFeatures};
use crate::fusion::MovModel;
use crate::numcore::io::{load_params, save_params};
use crate::numcore::ParamSet;
use crate::synthdata::manifest::{load_manifest, MANIFEST_FILE};
use crate::synthdata::{generate_dataset, DatasetManifest, Split};
use crate::trainer::{pretrain as run_pretrain, save_checkpoint, train as run_train, write_loss_curve, TrainOutcome, LOSS_CURVE};
use data::{load_split, LoadedSample, PretrainCorpus, TestViews, TrainClips};

pub use ablate::{ablate, AblationAxis, AblationRow, AblationTable};
pub use report::{aggregate_reports, ReportOutcome};

pub const RUN_SUMMARY: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";

/// Machine-readable record of one command invocation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub seed: u64,
    pub outputs: BTreeMap<String, PathBuf>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunSummary {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            seed: cfg.seed,
            ..Self::default()
        }
    }

    pub fn output(mut self, key: &str, path: &Path) -> Self {
        self.outputs.insert(key.to_string(), path.to_path_buf());
        self
    }

    pub fn metric(mut self, key: &str, v: f64) -> Self {
        self.metrics.insert(key.to_string(), v);
        self
    }

    /// Writes `run.json` and the config snapshot into `dir`.
    pub fn write(&self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        cfg.snapshot(dir)?;
        let p = dir.join(RUN_SUMMARY);
        let json = serde_json::to_string_pretty(self).map_err(|e| MovError::Serde(e.to_string()))?;
        fs::write(&p, json + "\n").map_err(|e| MovError::io(&p, e))
    }
}

/// Accepts either a dataset directory or the manifest file inside it.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Loads a manifest and returns it with the directory its paths are relative to.
pub fn open_manifest(p: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let path = manifest_path(p);
    let m = load_manifest(&path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((m, root))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let m = generate_dataset(&cfg.synth, out)?;
    RunSummary::new("synth", cfg)
        .output("manifest", &out.join(MANIFEST_FILE))
        .metric("samples", m.records.len() as f64)
        .write(out, cfg)?;
    Ok(m)
}

pub fn preprocess(cfg: &RunConfig, data_dir: &Path) -> Result<()> {
    let (m, root) = open_manifest(data_dir)?;
    data::preprocess(&m, &root, &cfg.data)?;
    RunSummary::new("preprocess", cfg)
        .metric("samples", m.records.len() as f64)
        .write(&root, cfg)
}

/// Contrastive image-caption pretraining of the video and text encoders.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<ParamSet> {
    cfg.validate()?;
    let model = MovModel::new(cfg.model.clone())?;
    let specs = cfg.synth.class_specs()?;
    let prompts = PromptSet::default();
    let corpus = PretrainCorpus {
        specs: &specs,
        world: &cfg.synth.world,
        data: &cfg.data,
        aux: cfg.model.aux,
        prompts: &prompts,
        size: cfg.pretrain.pairs_per_epoch,
        seed: cfg.pretrain.seed,
    };
    let outcome = run_pretrain(&model, model.init_backbone(cfg.seed), &corpus, &cfg.pretrain)?;
    save_params(out, &outcome.backbone)?;
    write_loss_curve(&out.join(LOSS_CURVE), &outcome.curve)?;
    let last = outcome.curve.last().map_or(f64::NAN, |p| p.loss);
    RunSummary::new("pretrain", cfg)
        .output("backbone", out)
        .metric("final_loss", last)
        .write(out, cfg)?;
    Ok(outcome.backbone)
}

/// Pretrained backbone from `cfg.paths.backbone`, or a fresh draw from the run seed.
pub fn load_backbone(cfg: &RunConfig, model: &MovModel) -> Result<ParamSet> {
    match &cfg.paths.backbone {
        Some(dir) => load_params(dir),
        None => Ok(model.init_backbone(cfg.seed)),
    }
}

/// Decoded splits shared by every run on one dataset.
pub struct Workspace {
    pub manifest: DatasetManifest,
    pub base_train: Vec<LoadedSample>,
    pub base_test: Vec<LoadedSample>,
    pub novel_test: Vec<LoadedSample>,
}

impl Workspace {
    pub fn load(cfg: &RunConfig, data: &Path) -> Result<Self> {
        let (manifest, root) = open_manifest(data)?;
        let modality = cfg.model.aux;
        Ok(Self {
            base_train: load_split(&manifest, &root, Split::BaseTrain, modality)?,
            base_test: load_split(&manifest, &root, Split::BaseTest, modality)?,
            novel_test: load_split(&manifest, &root, Split::NovelTest, modality)?,
            manifest,
        })
    }

    pub fn tables(&self, model: &MovModel, params: &ParamSet) -> Result<(EmbeddingTable, EmbeddingTable)> {
        let prompts = PromptSet::default();
        Ok((
            model.embedding_table(params, &self.manifest.base_classes, &prompts)?,
            model.embedding_table(params, &self.manifest.novel_classes, &prompts)?,
        ))
    }
}

/// Trains a fresh model of `cfg` from `backbone` on the base-train split.
pub fn train_on(cfg: &RunConfig, ws: &Workspace, backbone: &ParamSet) -> Result<(MovModel, TrainOutcome)> {
    cfg.validate()?;
    let model = MovModel::new(cfg.model.clone())?;
    let params = model.params_from_backbone(backbone, cfg.train.seed)?;
    let (table, _) = ws.tables(&model, &params)?;
    let clips = TrainClips {
        samples: &ws.base_train,
        modality: cfg.model.aux,
        cfg: &cfg.data,
    };
    let outcome = run_train(&model, params, &clips, &table, &cfg.train)?;
    Ok((model, outcome))
}

/// Multi-view features of both test splits.
pub fn test_features(
    cfg: &RunConfig,
    ws: &Workspace,
    model: &MovModel,
    params: &ParamSet,
) -> Result<(Vec<SampleFeatures>, Vec<SampleFeatures>)> {
    let views = |samples| TestViews {
        samples,
        modality: cfg.model.aux,
        cfg: &cfg.data,
        inference: &cfg.inference,
    };
    Ok((
        extract_features(model, params, &views(&ws.base_test))?,
        extract_features(model, params, &views(&ws.novel_test))?,
    ))
}

pub fn evaluate_on(cfg: &RunConfig, ws: &Workspace, model: &MovModel, params: &ParamSet) -> Result<EvalReport> {
    let (bf, nf) = test_features(cfg, ws, model, params)?;
    let (bt, nt) = ws.tables(model, params)?;
    score(cfg.model.fusion, &bf, &nf, &bt, &nt, &cfg.inference)
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainOutcome> {
    let ws = Workspace::load(cfg, data)?;
    let model = MovModel::new(cfg.model.clone())?;
    let backbone = load_backbone(cfg, &model)?;
    let (_, outcome) = train_on(cfg, &ws, &backbone)?;
    save_checkpoint(out, &outcome.params, CONFIG_SNAPSHOT, &cfg.to_toml()?, &outcome.curve)?;
    let last = outcome.curve.last().map_or(f64::NAN, |p| p.loss);
    RunSummary::new("train", cfg)
        .output("checkpoint", out)
        .output("loss_curve", &out.join(LOSS_CURVE))
        .metric("final_loss", last)
        .metric("final_epoch_acc", outcome.final_epoch_acc)
        .write(out, cfg)?;
    Ok(outcome)
}

/// Plot data: per-class deltas of this run against a reference report.
pub struct PlotData<'a> {
    pub csv: &'a Path,
    pub reference: &'a Path,
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    report_path: &Path,
    plot: Option<PlotData>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let ws = Workspace::load(cfg, data)?;
    let model = MovModel::new(cfg.model.clone())?;
    let params = load_params(checkpoint)?;
    let report = evaluate_on(cfg, &ws, &model, &params)?;
    let dir = report_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| MovError::io(dir, e))?;
    report.write(report_path)?;
    let mut summary = RunSummary::new("eval", cfg)
        .output("report", report_path)
        .metric("base_acc", report.base_acc)
        .metric("novel_acc", report.novel_acc)
        .metric("harmonic_mean", report.harmonic_mean);
    if let Some(p) = plot {
        let reference = EvalReport::read(p.reference)?;
        write_delta_csv(p.csv, &per_class_delta(&report, &reference)?)?;
        summary = summary.output("plot_data", p.csv);
    }
    summary.write(dir, cfg)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_records_outputs() {
        let d = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default().with_seed(4);
        RunSummary::new("x", &cfg)
            .output("a", Path::new("b"))
            .metric("m", 1.5)
            .write(d.path(), &cfg)
            .unwrap();
        let s: RunSummary = serde_json::from_str(&fs::read_to_string(d.path().join(RUN_SUMMARY)).unwrap()).unwrap();
        assert_eq!(s.seed, 4);
        assert_eq!(s.metrics["m"], 1.5);
        assert_eq!(RunConfig::load(&d.path().join(CONFIG_SNAPSHOT)).unwrap(), cfg);
    }

    #[test]
    fn manifest_path_accepts_dir_or_file() {
        let d = tempfile::tempdir().unwrap();
        assert_eq!(manifest_path(d.path()), d.path().join(MANIFEST_FILE));
        let f = d.path().join("m.jsonl");
        assert_eq!(manifest_path(&f), f);
    }
}

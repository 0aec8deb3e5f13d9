//! One-axis sweeps. Training axes retrain per grid point; inference axes
//! (`tau_v`, `beta`) train once and rescore cached features.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{load_backbone, test_features, train_on, RunSummary, Workspace, REPORT_FILE};
use crate::config::RunConfig;
use crate::error::{MovError, Result};
use crate::evaluator::{score, EvalReport, SUMMARY_HEADER};
use crate::fusion::{FusionMode, MovModel};
use crate::trainer::TrainableLayers;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    TrainableLayers,
    FusionMode,
    TauV,
    Alpha,
    Beta,
}

pub const TRAINABLE_LAYERS_GRID: [TrainableLayers; 5] = [
    TrainableLayers::Last(1),
    TrainableLayers::Last(3),
    TrainableLayers::Last(6),
    TrainableLayers::Last(9),
    TrainableLayers::All,
];
pub const TAU_V_GRID: [f64; 5] = [0.01, 0.003, 0.001, 0.0003, 0.0001];
pub const WEIGHT_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::TrainableLayers,
        AblationAxis::FusionMode,
        AblationAxis::TauV,
        AblationAxis::Alpha,
        AblationAxis::Beta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::TrainableLayers => "trainable_layers",
            AblationAxis::FusionMode => "fusion_mode",
            AblationAxis::TauV => "tau_v",
            AblationAxis::Alpha => "alpha",
            AblationAxis::Beta => "beta",
        }
    }

    /// Grid point labels in sweep order.
    pub fn grid(self) -> Vec<String> {
        match self {
            AblationAxis::TrainableLayers => TRAINABLE_LAYERS_GRID.iter().map(|l| l.to_string()).collect(),
            AblationAxis::FusionMode => FusionMode::ALL.iter().map(|m| m.label().to_string()).collect(),
            AblationAxis::TauV => TAU_V_GRID.iter().map(|t| t.to_string()).collect(),
            AblationAxis::Alpha | AblationAxis::Beta => WEIGHT_GRID.iter().map(|w| w.to_string()).collect(),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = MovError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
                MovError::invalid(format!("unknown ablation axis `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub point: String,
    /// `None` when the point does not apply to this configuration.
    pub report: Option<EvalReport>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},status,{SUMMARY_HEADER}\n", self.axis);
        let blank = ",".repeat(SUMMARY_HEADER.matches(',').count());
        for r in &self.rows {
            match &r.report {
                Some(rep) => s.push_str(&format!("{},ok,{}\n", r.point, rep.summary_row())),
                None => s.push_str(&format!("{},{},{blank}\n", r.point, r.note)),
            }
        }
        s
    }

    pub fn report(&self, point: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.point == point)?.report.as_ref()
    }
}

fn save_point(cfg: &RunConfig, dir: &Path, report: &EvalReport, train_acc: Option<f64>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MovError::io(dir, e))?;
    report.write(&dir.join(REPORT_FILE))?;
    let mut s = RunSummary::new("ablate", cfg)
        .output("report", &dir.join(REPORT_FILE))
        .metric("base_acc", report.base_acc)
        .metric("novel_acc", report.novel_acc)
        .metric("harmonic_mean", report.harmonic_mean);
    if let Some(a) = train_acc {
        s = s.metric("final_epoch_acc", a);
    }
    s.write(dir, cfg)
}

fn train_and_eval(cfg: &RunConfig, ws: &Workspace, out: &Path, point: &str) -> Result<AblationRow> {
    let model = MovModel::new(cfg.model.clone())?;
    let backbone = load_backbone(cfg, &model)?;
    let (model, outcome) = train_on(cfg, ws, &backbone)?;
    let report = super::evaluate_on(cfg, ws, &model, &outcome.params)?;
    save_point(cfg, &out.join(point), &report, Some(outcome.final_epoch_acc))?;
    Ok(AblationRow {
        point: point.to_string(),
        report: Some(report),
        note: String::new(),
    })
}

/// Sweeps `axis` over its grid on the dataset at `data`; writes one
/// sub-directory per point under `out/<axis>/` and `out/ablate_<axis>.csv`.
pub fn ablate(cfg: &RunConfig, axis: AblationAxis, data: &Path, out: &Path) -> Result<AblationTable> {
    cfg.validate()?;
    let ws = Workspace::load(cfg, data)?;
    ablate_on(cfg, axis, &ws, out)
}

pub fn ablate_on(cfg: &RunConfig, axis: AblationAxis, ws: &Workspace, out: &Path) -> Result<AblationTable> {
    let dir = out.join(axis.name());
    let labels = axis.grid();
    let mut rows = Vec::new();
    match axis {
        AblationAxis::TrainableLayers => {
            let depth = cfg.model.vit.layers;
            for (layers, label) in TRAINABLE_LAYERS_GRID.into_iter().zip(&labels) {
                if let TrainableLayers::Last(k) = layers {
                    if k > depth {
                        rows.push(AblationRow {
                            point: label.clone(),
                            report: None,
                            note: format!("skipped: encoder has {depth} layers"),
                        });
                        continue;
                    }
                }
                let mut c = cfg.clone();
                c.train.trainable_layers = layers;
                rows.push(train_and_eval(&c, ws, &dir, label)?);
            }
        }
        AblationAxis::FusionMode => {
            for (mode, label) in FusionMode::ALL.into_iter().zip(&labels) {
                let mut c = cfg.clone();
                c.model.fusion = mode;
                rows.push(train_and_eval(&c, ws, &dir, label)?);
            }
        }
        AblationAxis::Alpha => {
            for (&a, label) in WEIGHT_GRID.iter().zip(&labels) {
                let mut c = cfg.clone();
                c.train.alpha = a;
                rows.push(train_and_eval(&c, ws, &dir, label)?);
            }
        }
        AblationAxis::TauV | AblationAxis::Beta => {
            let model = MovModel::new(cfg.model.clone())?;
            let backbone = load_backbone(cfg, &model)?;
            let (model, outcome) = train_on(cfg, ws, &backbone)?;
            let (bf, nf) = test_features(cfg, ws, &model, &outcome.params)?;
            let (bt, nt) = ws.tables(&model, &outcome.params)?;
            let grid: &[f64] = if axis == AblationAxis::TauV { &TAU_V_GRID } else { &WEIGHT_GRID };
            for (&x, label) in grid.iter().zip(&labels) {
                let mut c = cfg.clone();
                if axis == AblationAxis::TauV {
                    c.inference.tau_v = x;
                } else {
                    c.inference.beta = x;
                }
                let report = score(c.model.fusion, &bf, &nf, &bt, &nt, &c.inference)?;
                save_point(&c, &dir.join(label), &report, Some(outcome.final_epoch_acc))?;
                rows.push(AblationRow {
                    point: label.clone(),
                    report: Some(report),
                    note: String::new(),
                });
            }
        }
    }
    let table = AblationTable { axis, rows };
    fs::create_dir_all(out).map_err(|e| MovError::io(out, e))?;
    let csv = out.join(format!("ablate_{axis}.csv"));
    fs::write(&csv, table.to_csv()).map_err(|e| MovError::io(&csv, e))?;
    RunSummary::new("ablate", cfg)
        .output("table", &csv)
        .metric("points", table.rows.len() as f64)
        .write(out, cfg)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_match_declared_values() {
        assert_eq!(AblationAxis::TrainableLayers.grid(), ["1", "3", "6", "9", "all"]);
        assert_eq!(AblationAxis::TauV.grid(), ["0.01", "0.003", "0.001", "0.0003", "0.0001"]);
        assert_eq!(
            AblationAxis::FusionMode.grid(),
            ["video-only", "aux-only", "score-fusion", "cross-attention"]
        );
        assert_eq!(AblationAxis::Alpha.grid().len(), 5);
        assert!(WEIGHT_GRID.iter().all(|w| (0.0..=1.0).contains(w)));
    }

    #[test]
    fn axis_parsing() {
        for a in AblationAxis::ALL {
            assert_eq!(a.name().parse::<AblationAxis>().unwrap(), a);
        }
        assert!(matches!("gamma".parse::<AblationAxis>(), Err(MovError::InvalidArgument(_))));
    }

    #[test]
    fn skipped_rows_keep_column_count() {
        let t = AblationTable {
            axis: AblationAxis::TrainableLayers,
            rows: vec![AblationRow {
                point: "9".into(),
                report: None,
                note: "skipped".into(),
            }],
        };
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].matches(',').count(), lines[1].matches(',').count());
    }
}

//! Split-level evaluation: feature extraction, scoring and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{aggregate_views, entropy, harmonic_mean, mix, predict_base, round1};
use crate::encoders::EmbeddingTable;
use crate::error::{ensure_arg, MovError, Result};
use crate::fusion::{ClipInput, FeatureBundle, FusionMode, MovModel};
use crate::numcore::{ParamSet, ProbabilityVector};

/// Test-time views per clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub temporal: usize,
    pub spatial: usize,
}

impl ViewSpec {
    pub fn count(&self) -> usize {
        self.temporal * self.spatial
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Base-class temperature.
    pub tau: f64,
    /// Novel video-path temperature.
    pub tau_v: f64,
    /// Novel auxiliary-path temperature (flow or audio).
    pub tau_aux: f64,
    pub beta: f64,
    pub views_video: ViewSpec,
    pub views_audio: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            tau_v: 0.003,
            tau_aux: 0.01,
            beta: 0.25,
            views_video: ViewSpec {
                temporal: 2,
                spatial: 1,
            },
            views_audio: 4,
        }
    }
}

impl InferenceConfig {
    /// Full-size view counts: 4 temporal x 3 spatial for video, 12 for audio.
    pub fn full_views() -> Self {
        Self {
            views_video: ViewSpec {
                temporal: 4,
                spatial: 3,
            },
            views_audio: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau", self.tau), ("tau_v", self.tau_v), ("tau_aux", self.tau_aux)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(MovError::config(format!("{name} must be positive, got {t}")));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(MovError::config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.views_video.count() == 0 || self.views_audio == 0 {
            return Err(MovError::config("view counts must be positive"));
        }
        Ok(())
    }
}

/// Labelled test clips, each with one or more views.
pub trait ViewSource: Sync {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    fn views(&self, i: usize) -> Result<Vec<ClipInput>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Model features of every view of one test clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleFeatures {
    pub label: usize,
    pub views: Vec<FeatureBundle>,
}

/// Runs the model once over every view; parallel over samples, ordered by index.
pub fn extract_features(model: &MovModel, params: &ParamSet, source: &dyn ViewSource) -> Result<Vec<SampleFeatures>> {
    (0..source.len())
        .into_par_iter()
        .map(|i| {
            let views = source.views(i)?;
            ensure_arg!(!views.is_empty(), "sample {i} has no views");
            let refs: Vec<&ClipInput> = views.iter().collect();
            Ok(SampleFeatures {
                label: source.label(i),
                views: model.features(params, &refs)?,
            })
        })
        .collect()
}

fn head<'a>(which: &'a Option<Vec<f64>>, name: &str) -> Result<&'a [f64]> {
    which
        .as_deref()
        .ok_or_else(|| MovError::invalid(format!("features lack `{name}` for this fusion mode")))
}

/// Base-class distribution of one view under `mode`.
pub fn base_scores(f: &FeatureBundle, mode: FusionMode, table: &EmbeddingTable, cfg: &InferenceConfig) -> Result<ProbabilityVector> {
    match mode {
        FusionMode::VideoOnly | FusionMode::CrossAttention => predict_base(head(&f.v_m, "v_m")?, table, cfg.tau),
        FusionMode::AuxOnly => predict_base(head(&f.x_m, "x_m")?, table, cfg.tau),
        FusionMode::ScoreFusion => mix(
            &predict_base(head(&f.x_m, "x_m")?, table, cfg.tau)?,
            &predict_base(head(&f.v_m, "v_m")?, table, cfg.tau)?,
            cfg.beta,
        ),
    }
}

/// Novel-class distributions of one view: (trained path, frozen video path, combined).
///
/// The trained path is `x_m` when the mode has an auxiliary branch, else
/// `v_m`. Aux-only models have no video path and use the trained path alone.
pub fn novel_scores(
    f: &FeatureBundle,
    mode: FusionMode,
    table: &EmbeddingTable,
    cfg: &InferenceConfig,
) -> Result<(ProbabilityVector, Option<ProbabilityVector>, ProbabilityVector)> {
    let trained = match mode {
        FusionMode::VideoOnly => head(&f.v_m, "v_m")?,
        _ => head(&f.x_m, "x_m")?,
    };
    let pt = predict_base(trained, table, cfg.tau_aux)?;
    if mode == FusionMode::AuxOnly {
        return Ok((pt.clone(), None, pt));
    }
    let pv = predict_base(&f.v_pooled, table, cfg.tau_v)?;
    let combined = mix(&pt, &pv, cfg.beta)?;
    Ok((pt, Some(pv), combined))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub fusion_mode: FusionMode,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub harmonic_mean: f64,
    /// Novel accuracy of the trained path alone.
    pub novel_acc_trained_path: f64,
    /// Novel accuracy of the frozen video path alone.
    pub novel_acc_video_path: Option<f64>,
    pub entropy_trained: f64,
    pub entropy_video: Option<f64>,
    pub tau_v: f64,
    pub beta: f64,
    pub n_base: usize,
    pub n_novel: usize,
    /// Per-class top-1 accuracy, base and novel classes together.
    pub per_class: BTreeMap<String, f64>,
}

fn pct(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

fn record(per_class: &mut BTreeMap<String, (usize, usize)>, name: &str, hit: bool) {
    let e = per_class.entry(name.to_string()).or_default();
    e.0 += hit as usize;
    e.1 += 1;
}

/// Scores pre-extracted features of both splits.
pub fn score(
    mode: FusionMode,
    base: &[SampleFeatures],
    novel: &[SampleFeatures],
    base_table: &EmbeddingTable,
    novel_table: &EmbeddingTable,
    cfg: &InferenceConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let b: BTreeSet<&String> = base_table.names().iter().collect();
    if let Some(c) = novel_table.names().iter().find(|n| b.contains(n)) {
        return Err(MovError::invalid(format!("class `{c}` is both base and novel")));
    }
    let mut per_class = BTreeMap::new();
    let mut base_hits = 0;
    for s in base {
        ensure_arg!(s.label < base_table.len(), "base label {} out of range", s.label);
        let views = s
            .views
            .iter()
            .map(|f| base_scores(f, mode, base_table, cfg))
            .collect::<Result<Vec<_>>>()?;
        let hit = aggregate_views(&views)?.argmax() == s.label;
        base_hits += hit as usize;
        record(&mut per_class, &base_table.names()[s.label], hit);
    }
    let (mut hits, mut trained_hits, mut video_hits) = (0, 0, 0);
    let (mut ent_t, mut ent_v) = (0.0, 0.0);
    for s in novel {
        ensure_arg!(s.label < novel_table.len(), "novel label {} out of range", s.label);
        let (mut pt, mut pv, mut pc) = (Vec::new(), Vec::new(), Vec::new());
        for f in &s.views {
            let (t, v, c) = novel_scores(f, mode, novel_table, cfg)?;
            pt.push(t);
            pv.extend(v);
            pc.push(c);
        }
        let pt = aggregate_views(&pt)?;
        let pc = aggregate_views(&pc)?;
        ent_t += entropy(&pt);
        trained_hits += (pt.argmax() == s.label) as usize;
        if !pv.is_empty() {
            let pv = aggregate_views(&pv)?;
            ent_v += entropy(&pv);
            video_hits += (pv.argmax() == s.label) as usize;
        }
        let hit = pc.argmax() == s.label;
        hits += hit as usize;
        record(&mut per_class, &novel_table.names()[s.label], hit);
    }
    let base_acc = pct(base_hits, base.len());
    let novel_acc = pct(hits, novel.len());
    let nn = novel.len().max(1) as f64;
    let has_video = mode != FusionMode::AuxOnly;
    Ok(EvalReport {
        fusion_mode: mode,
        base_acc,
        novel_acc,
        harmonic_mean: harmonic_mean(base_acc, novel_acc),
        novel_acc_trained_path: pct(trained_hits, novel.len()),
        novel_acc_video_path: has_video.then(|| pct(video_hits, novel.len())),
        entropy_trained: ent_t / nn,
        entropy_video: has_video.then_some(ent_v / nn),
        tau_v: cfg.tau_v,
        beta: cfg.beta,
        n_base: base.len(),
        n_novel: novel.len(),
        per_class: per_class
            .into_iter()
            .map(|(k, (h, n))| (k, pct(h, n)))
            .collect(),
    })
}

/// Extracts features of both splits and scores them.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &MovModel,
    params: &ParamSet,
    base: &dyn ViewSource,
    novel: &dyn ViewSource,
    base_table: &EmbeddingTable,
    novel_table: &EmbeddingTable,
    cfg: &InferenceConfig,
) -> Result<EvalReport> {
    let b: BTreeSet<&String> = base_table.names().iter().collect();
    ensure_arg!(
        novel_table.names().iter().all(|n| !b.contains(n)),
        "base and novel class sets overlap"
    );
    let bf = extract_features(model, params, base)?;
    let nf = extract_features(model, params, novel)?;
    score(model.cfg.fusion, &bf, &nf, base_table, novel_table, cfg)
}

/// Per-class accuracy differences `a - b`, sorted descending (ties by name).
pub fn per_class_delta(a: &EvalReport, b: &EvalReport) -> Result<Vec<(String, f64)>> {
    ensure_arg!(
        a.per_class.keys().eq(b.per_class.keys()),
        "reports cover different classes"
    );
    let mut d: Vec<(String, f64)> = a
        .per_class
        .iter()
        .zip(&b.per_class)
        .map(|((k, x), (_, y))| (k.clone(), x - y))
        .collect();
    d.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    Ok(d)
}

pub const SUMMARY_HEADER: &str = "fusion_mode,base_acc,novel_acc,harmonic_mean,novel_acc_trained_path,novel_acc_video_path,entropy_trained,entropy_video,tau_v,beta";

fn opt1(x: Option<f64>) -> String {
    x.map(|v| format!("{:.1}", round1(v))).unwrap_or_default()
}

impl EvalReport {
    /// One CSV row matching [`SUMMARY_HEADER`], accuracies to one decimal.
    pub fn summary_row(&self) -> String {
        format!(
            "{},{:.1},{:.1},{:.1},{:.1},{},{:.4},{},{},{}",
            self.fusion_mode.label(),
            round1(self.base_acc),
            round1(self.novel_acc),
            round1(self.harmonic_mean),
            round1(self.novel_acc_trained_path),
            opt1(self.novel_acc_video_path),
            self.entropy_trained,
            self.entropy_video.map(|e| format!("{e:.4}")).unwrap_or_default(),
            self.tau_v,
            self.beta
        )
    }

    /// `<stem>.json` with every field and `<stem>.csv` with the summary row.
    pub fn write(&self, json_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| MovError::Serde(e.to_string()))?;
        fs::write(json_path, json + "\n").map_err(|e| MovError::io(json_path, e))?;
        let csv_path = json_path.with_extension("csv");
        fs::write(&csv_path, format!("{SUMMARY_HEADER}\n{}\n", self.summary_row())).map_err(|e| MovError::io(&csv_path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MovError::io(path, e))?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| MovError::format(path, e.to_string()))?;
        if (r.harmonic_mean - harmonic_mean(r.base_acc, r.novel_acc)).abs() > 1e-9 {
            return Err(MovError::validation(format!(
                "{}: stored harmonic mean disagrees with its accuracies",
                path.display()
            )));
        }
        Ok(r)
    }
}

pub fn write_delta_csv(path: &Path, deltas: &[(String, f64)]) -> Result<()> {
    let mut s = String::from("class,delta\n");
    for (c, d) in deltas {
        s.push_str(&format!("{c},{:.1}\n", round1(*d)));
    }
    fs::write(path, s).map_err(|e| MovError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(prefix: &str, p: usize, d: usize, offset: usize) -> EmbeddingTable {
        let names = (0..p).map(|i| format!("{prefix}{i}")).collect();
        EmbeddingTable::new(names, Tensor::from_fn(&[p, d], |k| if k / d + offset == k % d { 1.0 } else { 0.0 })).unwrap()
    }

    fn bundle(v: Vec<f64>) -> FeatureBundle {
        FeatureBundle {
            v: Tensor::from_rows(&[v.clone()]).unwrap(),
            v_pooled: v.clone(),
            v_m: Some(v.clone()),
            x_m: Some(v),
        }
    }

    #[test]
    fn oracle_features_score_perfectly() {
        let d = 8;
        let bt = table("b", 3, d, 0);
        let nt = table("n", 4, d, 3);
        let base: Vec<SampleFeatures> = (0..3)
            .map(|c| SampleFeatures {
                label: c,
                views: vec![bundle(bt.matrix().row(c).to_vec())],
            })
            .collect();
        let novel: Vec<SampleFeatures> = (0..4)
            .map(|c| SampleFeatures {
                label: c,
                views: vec![bundle(nt.matrix().row(c).to_vec()); 2],
            })
            .collect();
        for mode in FusionMode::ALL {
            let r = score(mode, &base, &novel, &bt, &nt, &InferenceConfig::default()).unwrap();
            assert_eq!((r.base_acc, r.novel_acc, r.harmonic_mean), (100.0, 100.0, 100.0));
            assert_eq!(r.per_class.len(), 7);
        }
    }

    #[test]
    fn uniform_model_is_at_chance() {
        let d = 10;
        let (p, q) = (4, 5);
        let bt = table("b", p, d, 0);
        let nt = table("n", q, d, p);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // orthogonal to every class row: all-equal logits, ties go to class 0
        let mut f = vec![0.0; d];
        f[d - 1] = 1.0;
        let n = 400;
        let base: Vec<SampleFeatures> = (0..n)
            .map(|_| SampleFeatures {
                label: rng.random_range(0..p),
                views: vec![bundle(f.clone())],
            })
            .collect();
        let novel: Vec<SampleFeatures> = (0..n)
            .map(|_| SampleFeatures {
                label: rng.random_range(0..q),
                views: vec![bundle(f.clone())],
            })
            .collect();
        let r = score(FusionMode::CrossAttention, &base, &novel, &bt, &nt, &InferenceConfig::default()).unwrap();
        // binomial noise: 4 standard deviations
        let sd = |k: usize| 100.0 * ((1.0 / k as f64) * (1.0 - 1.0 / k as f64) / n as f64).sqrt();
        assert!((r.base_acc - 100.0 / p as f64).abs() < 4.0 * sd(p), "{}", r.base_acc);
        assert!((r.novel_acc - 100.0 / q as f64).abs() < 4.0 * sd(q), "{}", r.novel_acc);
        assert!((r.entropy_trained - (q as f64).ln()).abs() < 1e-9);
        assert_eq!(r.harmonic_mean, harmonic_mean(r.base_acc, r.novel_acc));
    }

    #[test]
    fn overlapping_classes_rejected() {
        let bt = table("c", 3, 6, 0);
        let nt = table("c", 2, 6, 3);
        assert!(matches!(
            score(FusionMode::VideoOnly, &[], &[], &bt, &nt, &InferenceConfig::default()),
            Err(MovError::InvalidArgument(_))
        ));
    }

    fn report(per_class: &[(&str, f64)]) -> EvalReport {
        EvalReport {
            fusion_mode: FusionMode::CrossAttention,
            base_acc: 50.0,
            novel_acc: 40.0,
            harmonic_mean: harmonic_mean(50.0, 40.0),
            novel_acc_trained_path: 0.0,
            novel_acc_video_path: None,
            entropy_trained: 0.0,
            entropy_video: None,
            tau_v: 0.003,
            beta: 0.25,
            n_base: 0,
            n_novel: 0,
            per_class: per_class.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn deltas() {
        let a = report(&[("x", 50.0), ("y", 60.0), ("z", 70.0)]);
        assert!(per_class_delta(&a, &a).unwrap().iter().all(|(_, d)| *d == 0.0));
        let b = report(&[("x", 50.0), ("y", 50.0), ("z", 70.0)]);
        let d = per_class_delta(&a, &b).unwrap();
        assert_eq!(d[0], ("y".to_string(), 10.0));
        // equal class sizes: the deltas sum to the difference of means times the class count
        let mean = |r: &EvalReport| r.per_class.values().sum::<f64>() / 3.0;
        let sum: f64 = d.iter().map(|x| x.1).sum();
        assert!((sum - (mean(&a) - mean(&b)) * 3.0).abs() < 1e-9);
        let c = report(&[("x", 1.0)]);
        assert!(per_class_delta(&a, &c).is_err());
    }

    #[test]
    fn report_round_trip_checks_harmonic_mean() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        let r = report(&[("x", 1.0)]);
        r.write(&p).unwrap();
        assert_eq!(EvalReport::read(&p).unwrap(), r);
        let csv = fs::read_to_string(p.with_extension("csv")).unwrap();
        assert!(csv.starts_with(SUMMARY_HEADER) && csv.contains("cross-attention,50.0,40.0,44.4"));
        let mut bad = r;
        bad.harmonic_mean = 10.0;
        fs::write(&p, serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(matches!(EvalReport::read(&p), Err(MovError::Validation(_))));
    }
}

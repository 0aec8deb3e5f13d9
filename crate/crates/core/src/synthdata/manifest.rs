//! Base/novel class splits and the line-delimited dataset manifest.
//!
//! A manifest is a header line followed by one line per sample:
//!
//! ```text
//! {"kind":"header","schema_version":1,"base_classes":[...],"novel_classes":[...]}
//! {"kind":"sample","schema_version":1,"id":"s00000","class_name":"...","split":"base-train","frames_dir":"samples/s00000","num_frames":16,"audio":"samples/s00000/audio.wav","seed":123}
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, MovError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub n_base: usize,
    pub n_novel: usize,
    pub seed: u64,
}

/// Seeded shuffle; the first `n_base` become base classes. Both lists keep
/// the input order.
pub fn split_classes(all: &[String], spec: &SplitSpec) -> Result<(Vec<String>, Vec<String>)> {
    ensure_arg!(
        spec.n_base + spec.n_novel == all.len(),
        "split {} + {} does not cover {} classes",
        spec.n_base,
        spec.n_novel,
        all.len()
    );
    let unique: BTreeSet<&String> = all.iter().collect();
    ensure_arg!(unique.len() == all.len(), "duplicate class names");
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut is_base = vec![false; all.len()];
    for &i in &idx[..spec.n_base] {
        is_base[i] = true;
    }
    let base = (0..all.len()).filter(|&i| is_base[i]).map(|i| all[i].clone()).collect();
    let novel = (0..all.len()).filter(|&i| !is_base[i]).map(|i| all[i].clone()).collect();
    Ok((base, novel))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    BaseTrain,
    BaseTest,
    NovelTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    kind: String,
    schema_version: u32,
    base_classes: Vec<String>,
    novel_classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    kind: String,
    schema_version: u32,
    id: String,
    class_name: String,
    split: Split,
    frames_dir: PathBuf,
    num_frames: usize,
    audio: PathBuf,
    seed: u64,
}

impl SampleLine {
    fn new(r: &ManifestRecord) -> Self {
        Self {
            kind: "sample".into(),
            schema_version: SCHEMA_VERSION,
            id: r.id.clone(),
            class_name: r.class_name.clone(),
            split: r.split,
            frames_dir: r.frames_dir.clone(),
            num_frames: r.num_frames,
            audio: r.audio.clone(),
            seed: r.seed,
        }
    }

    fn into_record(self) -> ManifestRecord {
        ManifestRecord {
            id: self.id,
            class_name: self.class_name,
            split: self.split,
            frames_dir: self.frames_dir,
            num_frames: self.num_frames,
            audio: self.audio,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub class_name: String,
    pub split: Split,
    pub frames_dir: PathBuf,
    pub num_frames: usize,
    pub audio: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

/// File name of frame `t` inside a sample's frame directory.
pub fn frame_file(t: usize) -> String {
    format!("frame_{t:03}.ppm")
}

impl DatasetManifest {
    /// Structural checks: disjoint class sets, novel classes only in
    /// novel-test, unique sample ids.
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(MovError::validation("manifest has no samples"));
        }
        let base: BTreeSet<&String> = self.base_classes.iter().collect();
        let novel: BTreeSet<&String> = self.novel_classes.iter().collect();
        if base.len() != self.base_classes.len() || novel.len() != self.novel_classes.len() {
            return Err(MovError::validation("duplicate class names in header"));
        }
        if let Some(c) = base.intersection(&novel).next() {
            return Err(MovError::validation(format!("class `{c}` is both base and novel")));
        }
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(&r.id) {
                return Err(MovError::validation(format!("duplicate sample id `{}`", r.id)));
            }
            let is_novel = novel.contains(&r.class_name);
            if !is_novel && !base.contains(&r.class_name) {
                return Err(MovError::validation(format!("sample `{}` has unknown class `{}`", r.id, r.class_name)));
            }
            match (is_novel, r.split) {
                (true, Split::NovelTest) | (false, Split::BaseTrain | Split::BaseTest) => {}
                (true, s) => {
                    return Err(MovError::validation(format!(
                        "novel class `{}` leaks into {s:?} via sample `{}`",
                        r.class_name, r.id
                    )))
                }
                (false, _) => {
                    return Err(MovError::validation(format!(
                        "base class sample `{}` marked novel-test",
                        r.id
                    )))
                }
            }
            if r.num_frames == 0 {
                return Err(MovError::validation(format!("sample `{}` has no frames", r.id)));
            }
        }
        Ok(())
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Class list (base or novel) that labels `split`.
    pub fn classes_for(&self, split: Split) -> &[String] {
        match split {
            Split::NovelTest => &self.novel_classes,
            _ => &self.base_classes,
        }
    }

    /// Label index of `r` within [`Self::classes_for`] its split.
    pub fn label_of(&self, r: &ManifestRecord) -> Result<usize> {
        self.classes_for(r.split)
            .iter()
            .position(|c| c == &r.class_name)
            .ok_or_else(|| MovError::validation(format!("class `{}` missing from header", r.class_name)))
    }
}

fn to_line<T: Serialize>(x: &T) -> Result<String> {
    serde_json::to_string(x).map_err(|e| MovError::Serde(e.to_string()))
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    m.validate()?;
    let mut out = to_line(&HeaderLine {
        kind: "header".into(),
        schema_version: SCHEMA_VERSION,
        base_classes: m.base_classes.clone(),
        novel_classes: m.novel_classes.clone(),
    })?;
    out.push('\n');
    for r in &m.records {
        out.push_str(&to_line(&SampleLine::new(r))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| MovError::io(path, e))
}

/// Parses and validates a manifest without touching the media files.
pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| MovError::validation(format!("{}: empty manifest", path.display())))?;
    let header: HeaderLine =
        serde_json::from_str(first).map_err(|e| MovError::format(path, format!("line 1: {e}")))?;
    if header.kind != "header" || header.schema_version != SCHEMA_VERSION {
        return Err(MovError::format(
            path,
            format!("expected a version {SCHEMA_VERSION} header line"),
        ));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let s: SampleLine =
            serde_json::from_str(line).map_err(|e| MovError::format(path, format!("line {}: {e}", i + 1)))?;
        if s.kind != "sample" || s.schema_version != SCHEMA_VERSION {
            return Err(MovError::format(path, format!("line {}: expected a sample record", i + 1)));
        }
        records.push(s.into_record());
    }
    let m = DatasetManifest {
        base_classes: header.base_classes,
        novel_classes: header.novel_classes,
        records,
    };
    m.validate()?;
    Ok(m)
}

/// Loads, validates, and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| MovError::io(path, e))?;
    let m = parse_manifest(&text, path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    for r in &m.records {
        let audio = root.join(&r.audio);
        if !audio.is_file() {
            return Err(MovError::validation(format!("missing audio file {}", audio.display())));
        }
        for t in 0..r.num_frames {
            let f = root.join(&r.frames_dir).join(frame_file(t));
            if !f.is_file() {
                return Err(MovError::validation(format!("missing frame {}", f.display())));
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i}")).collect()
    }

    #[test]
    fn reference_split_sizes() {
        let (b, n) = split_classes(&names(700), &SplitSpec { n_base: 400, n_novel: 300, seed: 0 }).unwrap();
        assert_eq!((b.len(), n.len()), (400, 300));
        let (b, n) = split_classes(&names(309), &SplitSpec { n_base: 154, n_novel: 155, seed: 3 }).unwrap();
        assert_eq!((b.len(), n.len()), (154, 155));
        let all: BTreeSet<_> = b.iter().chain(&n).collect();
        assert_eq!(all.len(), 309);
        assert!(split_classes(&names(10), &SplitSpec { n_base: 4, n_novel: 5, seed: 0 }).is_err());
    }

    #[test]
    fn split_depends_on_seed_only() {
        let s = SplitSpec { n_base: 10, n_novel: 6, seed: 7 };
        assert_eq!(split_classes(&names(16), &s).unwrap(), split_classes(&names(16), &s).unwrap());
        let other = SplitSpec { seed: 8, ..s };
        assert_ne!(split_classes(&names(16), &s).unwrap(), split_classes(&names(16), &other).unwrap());
    }

    fn rec(id: &str, class: &str, split: Split) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            class_name: class.into(),
            split,
            frames_dir: PathBuf::from("samples").join(id),
            num_frames: 2,
            audio: PathBuf::from("samples").join(id).join("audio.wav"),
            seed: 1,
        }
    }

    fn manifest() -> DatasetManifest {
        DatasetManifest {
            base_classes: vec!["a".into(), "b".into()],
            novel_classes: vec!["c".into()],
            records: vec![
                rec("s0", "a", Split::BaseTrain),
                rec("s1", "b", Split::BaseTest),
                rec("s2", "c", Split::NovelTest),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        write_manifest(&manifest(), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(parse_manifest(&text, &p).unwrap(), manifest());
    }

    #[test]
    fn novel_training_record_rejected() {
        let mut m = manifest();
        m.records.push(rec("s3", "c", Split::BaseTrain));
        assert!(matches!(m.validate(), Err(MovError::Validation(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        write_manifest(&manifest(), &p).unwrap();
        // inject the leak straight into the file
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str(&text.lines().nth(3).unwrap().replace("novel-test", "base-train").replace("s2", "s9"));
        assert!(matches!(parse_manifest(&text, &p), Err(MovError::Validation(_))));
    }

    #[test]
    fn empty_and_unknown_fields_rejected() {
        let p = Path::new("m.jsonl");
        assert!(parse_manifest("", p).is_err());
        let empty = DatasetManifest { records: vec![], ..manifest() };
        assert!(empty.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        write_manifest(&manifest(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replacen("\"seed\":1", "\"seed\":1,\"extra\":0", 1);
        assert!(matches!(parse_manifest(&text, &path), Err(MovError::Format { .. })));
    }

    #[test]
    fn missing_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        write_manifest(&manifest(), &p).unwrap();
        assert!(matches!(load_manifest(&p), Err(MovError::Validation(_))));
    }

    #[test]
    fn labels_index_split_classes() {
        let m = manifest();
        assert_eq!(m.label_of(&m.records[1]).unwrap(), 1);
        assert_eq!(m.label_of(&m.records[2]).unwrap(), 0);
    }
}

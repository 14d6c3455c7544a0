//! Corpus bookkeeping: one JSON-lines record per segment file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{Label, NoPatternKind, Provenance, Segment, N_CLASSES};
use crate::wav;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Segment path, relative to the manifest's directory.
    pub path: String,
    pub participant: String,
    pub label: String,
    pub kind: Option<NoPatternKind>,
    pub split_hint: String,
    /// True for noise-corrupted copies.
    #[serde(default)]
    pub augmented: bool,
}

impl ManifestEntry {
    pub fn new(path: String, participant: &str, label: Label, split_hint: &str, augmented: bool) -> Self {
        Self {
            path,
            participant: participant.to_string(),
            label: label.class_name().to_string(),
            kind: label.kind(),
            split_hint: split_hint.to_string(),
            augmented,
        }
    }

    pub fn label(&self) -> Result<Label> {
        Label::from_parts(&self.label, self.kind.map(NoPatternKind::name))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub per_class: [usize; N_CLASSES],
    pub per_kind: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            entries,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::format(&self.root, format!("duplicate manifest path '{}'", e.path)));
            }
            e.label()?;
        }
        Ok(())
    }

    pub fn counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        for e in &self.entries {
            if let Ok(l) = e.label() {
                c.per_class[l.class()] += 1;
            }
            let key = e.kind.map_or(e.label.clone(), |k| k.name().to_string());
            *c.per_kind.entry(key).or_default() += 1;
        }
        c
    }

    /// Participant ids in first-appearance order.
    pub fn participants(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.participant.as_str()))
            .map(|e| e.participant.clone())
            .collect()
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.path)
    }

    pub fn load_segment(&self, e: &ManifestEntry) -> Result<Segment> {
        let path = self.resolve(e);
        let wave = wav::read_wav(&path)?;
        Segment::new(wave, e.label()?, e.participant.clone(), Provenance::SyntheticDirect)
            .map_err(|err| Error::format(&path, err.to_string()))
    }

    pub fn load_all(&self) -> Result<Vec<Segment>> {
        self.entries.iter().map(|e| self.load_segment(e)).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; entry paths resolve against the file's directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|err| Error::format(path, format!("line {}: {err}", i + 1))))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, entries)
    }
}

/// Appends entries to a manifest file, creating it if needed.
pub fn append_entries(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(f, "{line}").map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(path: &str, label: Label) -> ManifestEntry {
        ManifestEntry::new(path.into(), "P00", label, "", false)
    }

    #[test]
    fn duplicate_paths_rejected() {
        let r = CorpusManifest::new("/tmp", vec![entry("a.wav", Label::Pattern1), entry("a.wav", Label::Pattern2)]);
        assert!(r.is_err());
    }

    #[test]
    fn counts_follow_entries() {
        let m = CorpusManifest::new(
            "/tmp",
            vec![
                entry("a.wav", Label::Pattern1),
                entry("b.wav", Label::NoPattern(NoPatternKind::Music)),
                entry("c.wav", Label::NoPattern(NoPatternKind::Music)),
            ],
        )
        .unwrap();
        let c = m.counts();
        assert_eq!(c.per_class, [2, 1, 0]);
        assert_eq!(c.per_kind["music"], 2);
    }

    #[test]
    fn jsonl_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let m = CorpusManifest::new(dir.path(), vec![entry("x/a.wav", Label::Pattern2)]).unwrap();
        m.write(&p).unwrap();
        append_entries(&p, &[entry("x/b.wav", Label::Pattern1)]).unwrap();
        let back = CorpusManifest::read(&p).unwrap();
        assert_eq!(back.entries.len(), 2);
        assert_eq!(back.entries[0], m.entries[0]);
        assert_eq!(back.root, dir.path());
    }
}

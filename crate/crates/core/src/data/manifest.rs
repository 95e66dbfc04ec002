//! Plain-text dataset index.
//!
//! One record per line: `<relative path> <subject> <class>`, separated by
//! tabs or spaces. Blank lines and lines starting with `#` are skipped. A
//! `# geometry <width>x<height>` comment sets the expected image size.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::image::probe;
use crate::error::{Error, Result};

pub const DEFAULT_GEOMETRY: (usize, usize) = (384, 384);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TissueClass {
    /// healthy colon
    HC,
    /// malignant colon
    MC,
    /// healthy peritoneum
    HP,
    /// malignant peritoneum
    MP,
}

impl TissueClass {
    pub const ALL: [TissueClass; 4] = [TissueClass::HC, TissueClass::MC, TissueClass::HP, TissueClass::MP];

    pub fn label(self) -> &'static str {
        match self {
            TissueClass::HC => "HC",
            TissueClass::MC => "MC",
            TissueClass::HP => "HP",
            TissueClass::MP => "MP",
        }
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TissueClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "HC" => Ok(TissueClass::HC),
            "MC" => Ok(TissueClass::MC),
            "HP" => Ok(TissueClass::HP),
            "MP" => Ok(TissueClass::MP),
            other => Err(format!("unknown class label {other:?} (expected HC, MC, HP or MP)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: PathBuf,
    pub subject: String,
    pub class: TissueClass,
}

/// Validated list of image records.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    geometry: (usize, usize),
    records: Vec<Record>,
}

impl DatasetManifest {
    /// Validates structure only: non-empty, unique paths, non-empty subjects.
    pub fn from_records(root: impl Into<PathBuf>, geometry: (usize, usize), records: Vec<Record>) -> Result<Self> {
        let root = root.into();
        let label = root.display().to_string();
        Self::validated(root, geometry, records, &label)
    }

    fn validated(root: PathBuf, geometry: (usize, usize), records: Vec<Record>, source: &str) -> Result<Self> {
        let loc = |i: usize| format!("{source}: record {}", i + 1);
        if records.is_empty() {
            return Err(Error::Manifest {
                location: source.to_string(),
                detail: "no records".into(),
            });
        }
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if r.subject.trim().is_empty() {
                return Err(Error::Manifest {
                    location: loc(i),
                    detail: "empty subject id".into(),
                });
            }
            if !seen.insert(&r.path) {
                return Err(Error::Manifest {
                    location: loc(i),
                    detail: format!("duplicate path {}", r.path.display()),
                });
            }
        }
        Ok(Self { root, geometry, records })
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>, source: &str) -> Result<Self> {
        let mut geometry = DEFAULT_GEOMETRY;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let loc = || format!("{source}:{}", lineno + 1);
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                let mut words = comment.split_whitespace();
                if words.next() == Some("geometry") {
                    geometry = words
                        .next()
                        .and_then(|g| g.split_once('x'))
                        .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)))
                        .ok_or_else(|| Error::Manifest {
                            location: loc(),
                            detail: format!("bad geometry line {line:?}"),
                        })?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [path, subject, class] = fields[..] else {
                return Err(Error::Manifest {
                    location: loc(),
                    detail: format!("expected 3 fields (path subject class), found {}", fields.len()),
                });
            };
            let class = class.parse().map_err(|detail| Error::Manifest { location: loc(), detail })?;
            records.push(Record {
                path: PathBuf::from(path),
                subject: subject.to_string(),
                class,
            });
        }
        Self::validated(root.into(), geometry, records, source)
    }

    pub fn render(&self) -> String {
        let mut out = format!("# geometry {}x{}\n", self.geometry.0, self.geometry.1);
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\n", r.path.display(), r.subject, r.class));
        }
        out
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn geometry(&self) -> (usize, usize) {
        self.geometry
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Sorted subject ids.
    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.records.iter().map(|r| r.subject.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn class_counts(&self) -> BTreeMap<TissueClass, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.class).or_insert(0) += 1;
        }
        counts
    }

    pub fn subject_counts(&self) -> BTreeMap<String, BTreeMap<TissueClass, usize>> {
        let mut counts: BTreeMap<String, BTreeMap<TissueClass, usize>> = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.subject.clone()).or_default().entry(r.class).or_insert(0) += 1;
        }
        counts
    }

    /// One-line census, e.g. `160 images, 4 subjects: HC 40, MC 40, HP 40, MP 40`.
    pub fn census(&self) -> String {
        let classes: Vec<String> = TissueClass::ALL
            .iter()
            .map(|c| format!("{c} {}", self.class_counts().get(c).copied().unwrap_or(0)))
            .collect();
        format!(
            "{} images, {} subjects: {}",
            self.records.len(),
            self.subjects().len(),
            classes.join(", ")
        )
    }

    /// Checks every referenced image exists, is single-channel and matches
    /// the declared geometry.
    pub fn verify_images(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            let path = self.resolve(r);
            let fail = |detail: String| Error::Manifest {
                location: format!("record {} ({})", i + 1, r.path.display()),
                detail,
            };
            let (w, h, c) = probe(&path).map_err(|e| fail(e.to_string()))?;
            if c != 1 {
                return Err(fail(format!("{c} channels, expected single-channel")));
            }
            if (w, h) != self.geometry {
                return Err(fail(format!(
                    "{w}x{h} image, expected {}x{}",
                    self.geometry.0, self.geometry.1
                )));
            }
        }
        Ok(())
    }
}

/// Reads an index file (or `manifest.tsv` inside a directory) and validates
/// records and images. Image paths resolve relative to the index's directory.
pub fn load_manifest(location: &Path) -> Result<DatasetManifest> {
    let index = if location.is_dir() {
        location.join("manifest.tsv")
    } else {
        location.to_path_buf()
    };
    let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let root = index.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest::parse(&text, root, &index.display().to_string())?;
    manifest.verify_images()?;
    Ok(manifest)
}

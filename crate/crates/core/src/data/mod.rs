//! Tracklet manifests, the synthetic generator, and batch sampling.
//!
//! Manifest file layout (UTF-8, tab separated, one tracklet per line):
//!
//! ```text
//! #vireid-manifest v1
//! split  id  platform  modality  camera  distractor  frames
//! train  3   ground    visible   G0-rgb  0           train/3/ground_visible_G0-rgb/0.png;...
//! ```
//!
//! Frame paths are relative to the directory holding the manifest.

mod sampler;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{Modality, Platform};
use crate::error::{ReidError, Result};

pub use sampler::{clip_indices, eval_clips, plan_batch, sample_batch, BatchPlan, ClipBatch, FrameStore};
pub use synth::{generate_synthetic, render_frame, IdentityLook, Pose, SynthSpec};

pub const MANIFEST_HEADER: &str = "#vireid-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Distractor,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Distractor => "distractor",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = ReidError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "distractor" => Ok(Split::Distractor),
            _ => Err(ReidError::Data(format!("unknown split `{s}`"))),
        }
    }
}

/// A single-person frame sequence from one camera.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tracklet {
    pub id: u32,
    pub platform: Platform,
    pub modality: Modality,
    pub camera: String,
    pub frames: Vec<String>,
    pub is_distractor: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub split: Split,
    pub tracklet: Tracklet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), entries: Vec::new() }
    }

    pub fn push(&mut self, split: Split, tracklet: Tracklet) {
        self.entries.push(Entry { split, tracklet });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tracklet(&self, i: usize) -> &Tracklet {
        &self.entries[i].tracklet
    }

    /// Indices of the entries in `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.entries.iter().enumerate().filter(|(_, e)| e.split == split).map(|(i, _)| i).collect()
    }

    pub fn identities(&self, split: Split) -> BTreeSet<u32> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.tracklet.id).collect()
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.entries.iter().any(|e| e.split == split)
    }

    pub fn frame_path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            let t = &e.tracklet;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.split,
                t.id,
                t.platform,
                t.modality,
                t.camera,
                u8::from(t.is_distractor),
                t.frames.join(";")
            ));
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == MANIFEST_HEADER => {}
            other => {
                return Err(ReidError::Data(format!(
                    "manifest header must be `{MANIFEST_HEADER}`, found {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut m = Manifest::new(root);
        for (ln, line) in lines.enumerate() {
            let line_no = ln + 2;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(ReidError::Data(format!("manifest line {line_no}: expected 7 fields, found {}", f.len())));
            }
            let bad = |what: &str| ReidError::Data(format!("manifest line {line_no}: bad {what}"));
            let split: Split = f[0].parse().map_err(|_| bad("split"))?;
            let id: u32 = f[1].parse().map_err(|_| bad("id"))?;
            let platform: Platform = f[2].parse().map_err(|_| bad("platform"))?;
            let modality: Modality = f[3].parse().map_err(|_| bad("modality"))?;
            let is_distractor = match f[5] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("distractor flag")),
            };
            let frames: Vec<String> = f[6].split(';').filter(|s| !s.is_empty()).map(str::to_string).collect();
            if frames.is_empty() {
                return Err(ReidError::Data(format!("manifest line {line_no}: tracklet has no frames")));
            }
            m.push(split, Tracklet { id, platform, modality, camera: f[4].to_string(), frames, is_distractor });
        }
        Ok(m)
    }

    /// Load `path`, which may be the manifest file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| ReidError::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn save(&self, file: &Path) -> Result<()> {
        let mut f = std::fs::File::create(file).map_err(|e| ReidError::io(file, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| ReidError::io(file, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    EmptyTracklet,
    TrainTestOverlap,
    DistractorInQueryRole,
    MissingFrame,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::EmptyTracklet => "empty-tracklet",
            Rule::TrainTestOverlap => "train-test-overlap",
            Rule::DistractorInQueryRole => "distractor-in-query-role",
            Rule::MissingFrame => "missing-frame",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub tracklet: usize,
    pub id: u32,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tracklet {} (id {}): {}: {}", self.tracklet, self.id, self.rule, self.detail)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitSummary {
    pub ids: usize,
    pub tracklets: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub summary: BTreeMap<Split, SplitSummary>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (split, s) in &self.summary {
            writeln!(f, "{split:<10} ids {:>6}  tracklets {:>7}  frames {:>9}", s.ids, s.tracklets, s.frames)?;
        }
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        Ok(())
    }
}

/// Check split separation, distractor placement and (optionally) frame files.
pub fn validate_manifest(manifest: &Manifest, check_files: bool) -> ValidationReport {
    let mut report = ValidationReport::default();
    let train_ids = manifest.identities(Split::Train);
    let test_ids = manifest.identities(Split::Test);
    let mut overlap_reported = BTreeSet::new();

    for (i, e) in manifest.entries.iter().enumerate() {
        let t = &e.tracklet;
        let mut flag = |rule, detail: String| report.violations.push(Violation { tracklet: i, id: t.id, rule, detail });
        if t.frames.is_empty() {
            flag(Rule::EmptyTracklet, "tracklet has no frames".into());
        }
        if e.split == Split::Test && train_ids.contains(&t.id) && overlap_reported.insert(t.id) {
            flag(Rule::TrainTestOverlap, format!("identity {} appears in both train and test", t.id));
        }
        match (e.split, t.is_distractor) {
            (Split::Distractor, false) => {
                flag(Rule::DistractorInQueryRole, "distractor split entry without distractor flag".into())
            }
            (Split::Train | Split::Test, true) => {
                flag(Rule::DistractorInQueryRole, format!("flagged distractor tagged `{}`", e.split))
            }
            (Split::Distractor, true) if test_ids.contains(&t.id) || train_ids.contains(&t.id) => flag(
                Rule::DistractorInQueryRole,
                format!("distractor identity {} also has train/test tracklets", t.id),
            ),
            _ => {}
        }
        if check_files {
            if let Some(missing) = t.frames.iter().find(|p| !manifest.frame_path(p).is_file()) {
                flag(Rule::MissingFrame, format!("cannot resolve {missing}"));
            }
        }
    }

    let mut ids: BTreeMap<Split, BTreeSet<u32>> = BTreeMap::new();
    for e in &manifest.entries {
        let s = report.summary.entry(e.split).or_default();
        s.tracklets += 1;
        s.frames += e.tracklet.frames.len();
        ids.entry(e.split).or_default().insert(e.tracklet.id);
    }
    for (split, set) in ids {
        report.summary.get_mut(&split).expect("summary row").ids = set.len();
    }
    report
}

//! Scene indexes and imager/label pairing by scan time.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::scene::{format_time, parse_time, read_header, SceneError, SceneKind};

const DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub path: PathBuf,
    pub time_begin: i64,
    pub kind: SceneKind,
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    path: String,
    time_begin: String,
    kind: SceneKind,
}

/// Time-sorted list of scenes of one or both kinds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneIndex {
    entries: Vec<IndexEntry>,
}

impl SceneIndex {
    /// Sorts the entries by time and rejects duplicate `(time, kind)` keys.
    pub fn new(mut entries: Vec<IndexEntry>) -> Result<Self, SceneError> {
        entries
            .sort_by(|a, b| (a.time_begin, a.kind, &a.path).cmp(&(b.time_begin, b.kind, &b.path)));
        if let Some(w) = entries
            .windows(2)
            .find(|w| w[0].time_begin == w[1].time_begin && w[0].kind == w[1].kind)
        {
            return Err(SceneError::InvalidScene(format!(
                "duplicate {:?} scene at {}",
                w[0].kind,
                format_time(w[0].time_begin)
            )));
        }
        Ok(Self { entries })
    }

    pub fn from_times(kind: SceneKind, times: &[i64]) -> Result<Self, SceneError> {
        Self::new(
            times
                .iter()
                .map(|&t| IndexEntry {
                    path: PathBuf::from(format!("{}_{t}.fyt", kind_str(kind))),
                    time_begin: t,
                    kind,
                })
                .collect(),
        )
    }

    /// Indexes every `.fyt` file in `dir` by reading container headers.
    pub fn scan_dir(dir: impl AsRef<Path>) -> Result<Self, SceneError> {
        let mut entries = Vec::new();
        for item in std::fs::read_dir(dir)? {
            let path = item?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("fyt") {
                continue;
            }
            let h = read_header(&path)?;
            entries.push(IndexEntry {
                time_begin: h.time_epoch()?,
                kind: h.kind,
                path,
            });
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries of one kind, still time-sorted.
    pub fn of_kind(&self, kind: SceneKind) -> SceneIndex {
        SceneIndex {
            entries: self
                .entries
                .iter()
                .filter(|e| e.kind == kind)
                .cloned()
                .collect(),
        }
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), SceneError> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.entries {
            let line = IndexLine {
                path: e.path.to_string_lossy().into_owned(),
                time_begin: format_time(e.time_begin),
                kind: e.kind,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self, SceneError> {
        let mut entries = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: IndexLine = serde_json::from_str(&line)?;
            entries.push(IndexEntry {
                path: PathBuf::from(l.path),
                time_begin: parse_time(&l.time_begin)?,
                kind: l.kind,
            });
        }
        Self::new(entries)
    }
}

fn kind_str(kind: SceneKind) -> &'static str {
    match kind {
        SceneKind::Imager => "imager",
        SceneKind::Label => "label",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub imager_path: PathBuf,
    pub label_path: PathBuf,
    /// Label time minus imager time.
    pub skew_seconds: i64,
}

/// Matching rule parameters. The window is a time-of-day range in UTC,
/// inclusive at both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    pub max_skew: i64,
    pub window_start: i64,
    pub window_end: i64,
}

impl Default for MatchParams {
    /// Daylight window 00:30 to 10:50 UTC, at most two minutes apart.
    fn default() -> Self {
        Self {
            max_skew: 120,
            window_start: 30 * 60,
            window_end: 10 * 3600 + 50 * 60,
        }
    }
}

impl MatchParams {
    pub fn in_window(&self, t: i64) -> bool {
        let tod = t.rem_euclid(DAY);
        tod >= self.window_start && tod <= self.window_end
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub imager_total: usize,
    pub imager_in_window: usize,
    pub matched: usize,
    pub unmatched: usize,
}

/// Pairs imager scenes with label scenes.
///
/// Imager scenes inside the window are visited in time order; each takes the
/// unused in-window label closest in time (earlier label on ties) if it lies
/// within `max_skew`. Labels are never reused.
pub fn match_pairs(
    imager: &SceneIndex,
    labels: &SceneIndex,
    params: &MatchParams,
) -> (Vec<MatchedPair>, MatchSummary) {
    let cands: Vec<&IndexEntry> = labels
        .entries
        .iter()
        .filter(|e| e.kind == SceneKind::Label && params.in_window(e.time_begin))
        .collect();
    let mut used = vec![false; cands.len()];
    let mut pairs = Vec::new();
    let mut summary = MatchSummary::default();

    for img in imager
        .entries
        .iter()
        .filter(|e| e.kind == SceneKind::Imager)
    {
        summary.imager_total += 1;
        if !params.in_window(img.time_begin) {
            continue;
        }
        summary.imager_in_window += 1;
        let t = img.time_begin;
        // First candidate at or after t; walk outward skipping used labels.
        let split = cands.partition_point(|c| c.time_begin < t);
        let left = (0..split).rev().find(|&i| !used[i]);
        let right = (split..cands.len()).find(|&i| !used[i]);
        let best = match (left, right) {
            (Some(l), Some(r)) => {
                if t - cands[l].time_begin <= cands[r].time_begin - t {
                    Some(l)
                } else {
                    Some(r)
                }
            }
            (l, r) => l.or(r),
        };
        match best {
            Some(i) if (cands[i].time_begin - t).abs() <= params.max_skew => {
                used[i] = true;
                pairs.push(MatchedPair {
                    imager_path: img.path.clone(),
                    label_path: cands[i].path.clone(),
                    skew_seconds: cands[i].time_begin - t,
                });
            }
            _ => summary.unmatched += 1,
        }
    }
    summary.matched = pairs.len();
    (pairs, summary)
}

pub fn write_pairs_jsonl(pairs: &[MatchedPair], path: impl AsRef<Path>) -> Result<(), SceneError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs_jsonl(path: impl AsRef<Path>) -> Result<Vec<MatchedPair>, SceneError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

//! Class labels and the `id,label[;label…]` CSV format.
//!
//! Relevance between two samples is label-set intersection, which covers
//! single-label data as the special case of one label per sample.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Label = u32;

/// Sorted, de-duplicated, non-empty set of labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelSet(Vec<Label>);

impl LabelSet {
    pub fn new(labels: impl IntoIterator<Item = Label>) -> Result<Self> {
        let set: BTreeSet<Label> = labels.into_iter().collect();
        if set.is_empty() {
            return Err(Error::InvalidInput("label set is empty".into()));
        }
        Ok(Self(set.into_iter().collect()))
    }

    pub fn single(label: Label) -> Self {
        Self(vec![label])
    }

    pub fn labels(&self) -> &[Label] {
        &self.0
    }

    pub fn intersects(&self, other: &LabelSet) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }
}

/// Parse a labels CSV with one row per sample. Row ids must be exactly
/// `0..n` (in any order); an optional non-numeric header row is skipped.
pub fn parse_labels_csv(text: &str) -> Result<Vec<LabelSet>> {
    let mut rows: Vec<Option<LabelSet>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, labels) = line.split_once(',').ok_or_else(|| {
            Error::Format(format!("line {}: expected `id,label[;label…]`", lineno + 1))
        })?;
        let Ok(id) = id.trim().parse::<usize>() else {
            if lineno == 0 {
                continue;
            }
            return Err(Error::Format(format!("line {}: bad id {id:?}", lineno + 1)));
        };
        let set = labels
            .split(';')
            .map(|l| {
                l.trim().parse::<Label>().map_err(|_| {
                    Error::Format(format!("line {}: bad label {l:?}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if id >= rows.len() {
            rows.resize(id + 1, None);
        }
        if rows[id].is_some() {
            return Err(Error::Format(format!("line {}: duplicate id {id}", lineno + 1)));
        }
        rows[id] = Some(LabelSet::new(set)?);
    }
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| Error::Format(format!("missing row for id {i}"))))
        .collect()
}

pub fn format_labels_csv(labels: &[LabelSet]) -> String {
    let mut out = String::new();
    for (i, set) in labels.iter().enumerate() {
        let joined: Vec<String> = set.labels().iter().map(|l| l.to_string()).collect();
        writeln!(out, "{i},{}", joined.join(";")).expect("writing to a String");
    }
    out
}

pub fn load(path: &Path) -> Result<Vec<LabelSet>> {
    parse_labels_csv(&fs::read_to_string(path)?)
}

pub fn save(path: &Path, labels: &[LabelSet]) -> Result<()> {
    fs::write(path, format_labels_csv(labels))?;
    Ok(())
}

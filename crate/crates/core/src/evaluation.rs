//! Per-image votes, confidence-weighted polyp aggregation, confusion
//! metrics and the modality-stratified report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Focus, Light};
use crate::error::{Error, Result};

/// Report columns, in table order.
pub const COLUMNS: [&str; 10] = [
    "All Images",
    "All Polyps",
    "NBI",
    "NBI-F",
    "NBI-N",
    "WL",
    "WL-F",
    "WL-N",
    "Near",
    "Far",
];

/// One image's binary vote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageVote {
    pub polyp_id: String,
    pub image_id: String,
    /// P(positive)
    pub score: f64,
    pub confidence: f64,
    pub light: Light,
    pub focus: Focus,
}

impl ImageVote {
    /// Vote with confidence `2 |score - 0.5|`.
    pub fn binary(
        polyp_id: impl Into<String>,
        image_id: impl Into<String>,
        score: f64,
        light: Light,
        focus: Focus,
    ) -> Self {
        ImageVote {
            polyp_id: polyp_id.into(),
            image_id: image_id.into(),
            score,
            confidence: (2.0 * (score - 0.5).abs()).min(1.0),
            light,
            focus,
        }
    }

    pub fn predicted(&self) -> usize {
        usize::from(self.score >= 0.5)
    }
}

/// Confidence-weighted mean score of one polyp's votes and the class it
/// implies (1 iff score >= 0.5). Falls back to the plain mean when every
/// confidence is zero.
pub fn aggregate_polyp(votes: &[&ImageVote]) -> Result<(f64, usize)> {
    let first = votes
        .first()
        .ok_or_else(|| Error::Data("cannot aggregate an empty vote list".into()))?;
    if let Some(v) = votes.iter().find(|v| v.polyp_id != first.polyp_id) {
        return Err(Error::Data(format!(
            "votes mix polyps {} and {}",
            first.polyp_id, v.polyp_id
        )));
    }
    let score = if votes.iter().all(|v| v.score == first.score) {
        first.score
    } else {
        // canonical summation order keeps the result independent of vote order
        let mut pairs: Vec<(f64, f64)> = votes.iter().map(|v| (v.confidence, v.score)).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let wsum: f64 = pairs.iter().map(|p| p.0).sum();
        if wsum > 0.0 {
            pairs.iter().map(|p| p.0 * p.1).sum::<f64>() / wsum
        } else {
            pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64
        }
    };
    Ok((score, usize::from(score >= 0.5)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn record(&mut self, predicted: usize, label: usize) {
        match (predicted == 1, label == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Accuracy, sensitivity and specificity; `None` where the denominator
/// is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Data("no evaluated units".into()));
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(Metrics {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
    })
}

/// One report column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub column: String,
    /// Images ("All Images") or polyps (every other column) evaluated.
    pub count: usize,
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl Cell {
    fn from_counts(column: &str, counts: ConfusionCounts) -> Self {
        let m = metrics(&counts).ok();
        Cell {
            column: column.to_string(),
            count: counts.total(),
            counts,
            accuracy: m.map(|m| m.accuracy),
            sensitivity: m.and_then(|m| m.sensitivity),
            specificity: m.and_then(|m| m.specificity),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cells: Vec<Cell>,
}

fn in_stratum(column: &str, v: &ImageVote) -> bool {
    use Focus::{Far, Near};
    use Light::{Nbi, Wl};
    match column {
        "All Polyps" => true,
        "NBI" => v.light == Nbi,
        "NBI-F" => v.light == Nbi && v.focus == Far,
        "NBI-N" => v.light == Nbi && v.focus == Near,
        "WL" => v.light == Wl,
        "WL-F" => v.light == Wl && v.focus == Far,
        "WL-N" => v.light == Wl && v.focus == Near,
        "Near" => v.focus == Near,
        "Far" => v.focus == Far,
        _ => false,
    }
}

/// Per-image accuracy in "All Images"; every other column aggregates each
/// polyp's votes within the stratum. `labels` maps polyp id to class.
/// With `per_image` false the "All Images" column is left empty.
pub fn stratified_report(
    votes: &[ImageVote],
    labels: &BTreeMap<String, usize>,
    per_image: bool,
) -> Result<Report> {
    let label_of = |id: &str| -> Result<usize> {
        labels
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("no label for polyp {id}")))
    };
    let mut by_polyp: BTreeMap<&str, Vec<&ImageVote>> = BTreeMap::new();
    for v in votes {
        by_polyp.entry(&v.polyp_id).or_default().push(v);
    }
    let mut cells = Vec::with_capacity(COLUMNS.len());
    let mut images = ConfusionCounts::default();
    if per_image {
        for v in votes {
            images.record(v.predicted(), label_of(&v.polyp_id)?);
        }
    }
    cells.push(Cell::from_counts(COLUMNS[0], images));
    for column in &COLUMNS[1..] {
        let mut counts = ConfusionCounts::default();
        for (id, pv) in &by_polyp {
            let kept: Vec<&ImageVote> = pv.iter().copied().filter(|v| in_stratum(column, v)).collect();
            if kept.is_empty() {
                continue;
            }
            let (_, class) = aggregate_polyp(&kept)?;
            counts.record(class, label_of(id)?);
        }
        cells.push(Cell::from_counts(column, counts));
    }
    Ok(Report { cells })
}

impl Report {
    pub fn column(&self, name: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.column == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(text)?;
        let names: Vec<&str> = r.cells.iter().map(|c| c.column.as_str()).collect();
        if names != COLUMNS {
            return Err(Error::Data(format!("report columns {names:?} differ from {COLUMNS:?}")));
        }
        Ok(r)
    }

    /// Aligned table: one column per stratum, rows for accuracy,
    /// sensitivity, specificity (percent) and the unit count.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        let rows: Vec<(&str, Vec<String>)> = vec![
            ("", self.cells.iter().map(|c| c.column.clone()).collect()),
            ("Acc. %", self.cells.iter().map(|c| pct(c.accuracy)).collect()),
            ("Sen. %", self.cells.iter().map(|c| pct(c.sensitivity)).collect()),
            ("Spe. %", self.cells.iter().map(|c| pct(c.specificity)).collect()),
            ("N", self.cells.iter().map(|c| c.count.to_string()).collect()),
        ];
        let widths: Vec<usize> = (0..self.cells.len())
            .map(|i| rows.iter().map(|r| r.1[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (label, cells) in &rows {
            let _ = write!(out, "{label:<8}");
            for (cell, w) in cells.iter().zip(&widths) {
                let _ = write!(out, "  {cell:>w$}");
            }
            out.push('\n');
        }
        out
    }

    /// Write `<stem>.json` and `<stem>.txt` into `dir`.
    pub fn emit(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        fs::write(dir.join(format!("{stem}.txt")), self.to_table())?;
        Ok(())
    }
}

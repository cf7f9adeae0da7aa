use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::train::{Mode, RunMetrics};
use crate::{Error, Result};

pub const SUMMARY_NAME: &str = "summary.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub top1: f64,
    pub top5: f64,
    /// Runs (seeds) the medians were taken over.
    pub runs: usize,
}

/// Best validation accuracies by quality (rows) and mode (column groups).
/// Several runs in one cell are summarized by their median.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub qualities: Vec<u8>,
    pub modes: Vec<Mode>,
    pub cells: BTreeMap<(u8, Mode), Cell>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Read `summary.json` from each directory. Directories without a readable
/// summary are skipped with a warning.
pub fn collect_runs(dirs: &[PathBuf]) -> Vec<(PathBuf, RunMetrics)> {
    dirs.iter()
        .filter_map(|d| {
            let p = d.join(SUMMARY_NAME);
            if !p.is_file() {
                log::warn!("skipping {}: no {SUMMARY_NAME}", d.display());
                return None;
            }
            match RunMetrics::read_summary(&p) {
                Ok(m) => Some((d.clone(), m)),
                Err(e) => {
                    log::warn!("skipping {}: {e}", d.display());
                    None
                }
            }
        })
        .collect()
}

impl ReportTable {
    /// Codec runs carry no accuracy and are left out.
    pub fn from_runs<'a>(runs: impl IntoIterator<Item = &'a RunMetrics>) -> Result<Self> {
        let mut groups: BTreeMap<(u8, Mode), Vec<(f64, f64)>> = BTreeMap::new();
        for r in runs {
            if let (Some(t1), Some(t5)) = (r.best_top1, r.best_top5) {
                groups.entry((r.quality_index, r.mode)).or_default().push((t1, t5));
            }
        }
        if groups.is_empty() {
            return Err(Error::Config("no classifier runs to report".into()));
        }
        let mut qualities: Vec<u8> = groups.keys().map(|k| k.0).collect();
        qualities.dedup();
        let mut modes: Vec<Mode> = [Mode::Frozen, Mode::Joint]
            .into_iter()
            .filter(|m| groups.keys().any(|k| k.1 == *m))
            .collect();
        modes.dedup();
        let cells = groups
            .into_iter()
            .map(|(k, v)| {
                let t1: Vec<f64> = v.iter().map(|x| x.0).collect();
                let t5: Vec<f64> = v.iter().map(|x| x.1).collect();
                let cell = Cell {
                    top1: median(&t1),
                    top5: median(&t5),
                    runs: v.len(),
                };
                (k, cell)
            })
            .collect();
        Ok(ReportTable {
            qualities,
            modes,
            cells,
        })
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["quality".to_string()];
        for m in &self.modes {
            h.push(format!("{}_top1", m.as_str()));
            h.push(format!("{}_top5", m.as_str()));
        }
        h
    }

    fn rows(&self, fmt: impl Fn(f64) -> String, missing: &str) -> Vec<Vec<String>> {
        self.qualities
            .iter()
            .map(|&q| {
                let mut row = vec![q.to_string()];
                for m in &self.modes {
                    match self.cells.get(&(q, *m)) {
                        Some(c) => {
                            row.push(fmt(c.top1));
                            row.push(fmt(c.top5));
                        }
                        None => {
                            row.push(missing.to_string());
                            row.push(missing.to_string());
                        }
                    }
                }
                row
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fe = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(self.header()).map_err(fe)?;
        for r in self.rows(|v| format!("{v:.2}"), "") {
            w.write_record(r).map_err(fe)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_markdown(&self) -> String {
        let mut head = vec!["Quality".to_string()];
        for m in &self.modes {
            let name = match m {
                Mode::Frozen => "Baseline",
                Mode::Joint => "Joint",
                Mode::Codec => "Codec",
            };
            head.push(format!("{name} Val Top-1 Acc"));
            head.push(format!("{name} Val Top-5 Acc"));
        }
        let mut out = format!("| {} |\n", head.join(" | "));
        out += &format!("|{}\n", "---|".repeat(head.len()));
        for r in self.rows(|v| format!("{v:.2}"), "–") {
            out += &format!("| {} |\n", r.join(" | "));
        }
        if self.cells.values().any(|c| c.runs > 1) {
            out += "\nCells with several runs show the median over runs.\n";
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let md = dir.join("report.md");
        let csv = dir.join("report.csv");
        std::fs::write(&md, self.to_markdown())?;
        std::fs::write(&csv, self.to_csv()?)?;
        Ok((md, csv))
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::{Error, Result};

/// One row of `metrics.csv`. Classification columns are empty for codec
/// runs, the distortion column is empty otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub mean_bpp: f64,
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: Mode,
    pub quality_index: u8,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_top1: Option<f64>,
    /// Top-5 of the best epoch.
    pub best_top5: Option<f64>,
    /// Kept out of `summary.json` so reruns write identical files.
    #[serde(default, skip_serializing)]
    pub wall_time_s: f64,
    /// SHA-256 of the analysis-side codec weights before and after.
    pub encoder_hash_before: Option<String>,
    pub encoder_hash_after: Option<String>,
    /// Largest gradient norm seen on encoder parameters (joint runs).
    pub encoder_grad_norm_max: Option<f64>,
}

impl RunMetrics {
    pub fn new(mode: Mode, quality_index: u8, seed: u64, config_hash: String) -> Self {
        RunMetrics {
            mode,
            quality_index,
            seed,
            config_hash,
            epochs: Vec::new(),
            best_epoch: None,
            best_top1: None,
            best_top5: None,
            wall_time_s: 0.0,
            encoder_hash_before: None,
            encoder_hash_after: None,
            encoder_grad_norm_max: None,
        }
    }

    /// Record an epoch; returns whether it is the new best by val top-1
    /// (codec runs: by val loss). Ties keep the earlier epoch.
    pub fn push(&mut self, m: EpochMetrics) -> bool {
        let better = match (m.val_top1, self.best_top1) {
            (Some(t), Some(best)) => t > best,
            (Some(_), None) => true,
            (None, _) => self
                .best_epoch
                .and_then(|e| self.epochs.iter().find(|x| x.epoch == e))
                .is_none_or(|b| m.val_loss < b.val_loss),
        };
        if better {
            self.best_epoch = Some(m.epoch);
            self.best_top1 = m.val_top1;
            self.best_top5 = m.val_top5;
        }
        self.epochs.push(m);
        better
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e).map_err(|e| Error::Format(e.to_string()))?;
        }
        if self.epochs.is_empty() {
            w.write_record([
                "epoch",
                "train_loss",
                "val_loss",
                "val_top1",
                "val_top5",
                "mean_bpp",
                "val_mse",
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        r.deserialize()
            .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn read_summary(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, top1: Option<f64>, val_loss: f64) -> EpochMetrics {
        EpochMetrics {
            epoch,
            train_loss: 1.0,
            val_loss,
            val_top1: top1,
            val_top5: top1.map(|_| 100.0),
            mean_bpp: 0.25,
            val_mse: None,
        }
    }

    #[test]
    fn best_tracks_max_top1_with_earliest_tie() {
        let mut m = RunMetrics::new(Mode::Frozen, 4, 0, "x".into());
        for (e, t) in [(1, 30.0), (2, 55.0), (3, 55.0), (4, 40.0)] {
            m.push(row(e, Some(t), 1.0));
        }
        assert_eq!(m.best_epoch, Some(2));
        let max = m.epochs.iter().filter_map(|e| e.val_top1).fold(f64::MIN, f64::max);
        assert_eq!(m.best_top1, Some(max));

        let mut c = RunMetrics::new(Mode::Codec, 4, 0, "x".into());
        for (e, l) in [(1, 3.0), (2, 2.0), (3, 2.5)] {
            c.push(row(e, None, l));
        }
        assert_eq!(c.best_epoch, Some(2));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunMetrics::new(Mode::Frozen, 4, 0, "x".into());
        m.push(row(1, Some(25.0), 1.5));
        m.push(row(2, None, 1.25));
        let p = dir.path().join("m.csv");
        m.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,val_top1,val_top5,mean_bpp,val_mse\n"));
        assert_eq!(RunMetrics::read_csv(&p).unwrap(), m.epochs);
        let s = dir.path().join("s.json");
        m.write_summary(&s).unwrap();
        assert_eq!(RunMetrics::read_summary(&s).unwrap(), m);
    }
}

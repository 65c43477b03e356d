//! Metrics files: one JSON record per line, flushed as written, and their
//! flat CSV export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use omninft_core::trainer::IterationMetrics;
use serde::{Deserialize, Serialize};

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    /// Appends one record and flushes, so an interrupted run leaves a valid prefix.
    pub fn append(&mut self, record: &IterationMetrics) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed metrics record", path.display(), i + 1))?;
        records.push(record);
    }
    Ok(records)
}

/// One CSV row per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub mode: String,
    pub wall_time_s: f64,
    pub reward_video_mean: f64,
    pub reward_video_std: f64,
    pub reward_audio_mean: f64,
    pub reward_audio_std: f64,
    pub reward_sync_mean: f64,
    pub reward_sync_std: f64,
    pub loss_video: f64,
    pub loss_audio: f64,
    pub loss_total: f64,
    pub conflict_rate: f64,
    /// Empty on iterations without a gradient profile.
    pub grad_norm_total: Option<f64>,
}

impl From<&IterationMetrics> for MetricsRow {
    fn from(m: &IterationMetrics) -> Self {
        Self {
            iteration: m.iteration,
            mode: m.mode.clone(),
            wall_time_s: m.wall_time_s,
            reward_video_mean: m.reward_video.mean,
            reward_video_std: m.reward_video.std,
            reward_audio_mean: m.reward_audio.mean,
            reward_audio_std: m.reward_audio.std,
            reward_sync_mean: m.reward_sync.mean,
            reward_sync_std: m.reward_sync.std,
            loss_video: m.loss_video,
            loss_audio: m.loss_audio,
            loss_total: m.loss_total,
            conflict_rate: m.conflict_rate,
            grad_norm_total: m.grad_norms.as_ref().map(|g| g.total),
        }
    }
}

pub const CSV_HEADER: [&str; 14] = [
    "iteration",
    "mode",
    "wall_time_s",
    "reward_video_mean",
    "reward_video_std",
    "reward_audio_mean",
    "reward_audio_std",
    "reward_sync_mean",
    "reward_sync_std",
    "loss_video",
    "loss_audio",
    "loss_total",
    "conflict_rate",
    "grad_norm_total",
];

/// Writes `records` as CSV with `delimiter`. The header is written even when
/// there are no records.
pub fn write_table<W: Write>(records: &[IterationMetrics], out: W, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.serialize(MetricsRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table<R: std::io::Read>(input: R, delimiter: u8) -> Result<Vec<MetricsRow>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_reader(input);
    let rows = r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

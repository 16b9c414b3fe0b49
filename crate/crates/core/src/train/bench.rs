//! Inference latency of the student pipeline per frame budget.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};

use super::model::{Model, Prepared};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub warmup_batches: usize,
    pub timed_batches: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            warmup_batches: 10,
            timed_batches: 200,
        }
    }
}

/// Per-video wall-clock statistics at one frame budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub pipeline: String,
    pub frames: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub timed_batches: usize,
    /// Median at the largest frame count divided by this row's median.
    pub speedup_vs_max: f64,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Median of unsorted values (mean of the middle pair for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_batches(
    data: &Prepared,
    cfg: &BenchConfig,
    mut run: impl FnMut(&super::model::Batch) -> Result<()>,
) -> Result<Vec<f64>> {
    let n = data.data.val.len();
    if n < cfg.batch_size || cfg.batch_size == 0 {
        return Err(Error::config("bench.batch_size", "must be between 1 and the validation size"));
    }
    let batches = n / cfg.batch_size;
    let mut per_video = Vec::with_capacity(cfg.timed_batches);
    for i in 0..cfg.warmup_batches + cfg.timed_batches {
        let start = (i % batches) * cfg.batch_size;
        let batch = data.val_batch(start..start + cfg.batch_size)?;
        let t0 = Instant::now();
        run(&batch)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        if i >= cfg.warmup_batches {
            per_video.push(ms / cfg.batch_size as f64);
        }
    }
    Ok(per_video)
}

fn row(pipeline: &str, frames: usize, mut per_video: Vec<f64>) -> LatencyRow {
    per_video.sort_by(f64::total_cmp);
    LatencyRow {
        pipeline: pipeline.into(),
        frames,
        median_ms: median(&per_video),
        p95_ms: percentile(&per_video, 0.95),
        mean_ms: per_video.iter().sum::<f64>() / per_video.len() as f64,
        timed_batches: per_video.len(),
        speedup_vs_max: f64::NAN,
    }
}

/// Student pipeline (selection, fusion over `frames` frames, guide attention,
/// answer scoring) timed single-threaded at each frame count.
pub fn bench_student(model: &Model, data: &Prepared, frame_counts: &[usize], cfg: &BenchConfig) -> Result<Vec<LatencyRow>> {
    if frame_counts.is_empty() {
        return Err(Error::config("frames", "frame_counts must not be empty"));
    }
    let t = model.cfg.data.frames;
    if let Some(&bad) = frame_counts.iter().find(|&&f| f == 0 || f > t) {
        return Err(Error::config("frames", format!("frame count {bad} outside 1..={t}")));
    }
    let mut rows = Vec::new();
    for &frames in frame_counts {
        let mut m = model.clone();
        let per_video = time_batches(data, cfg, |batch| {
            let mut g = Graph::new();
            m.bind_frozen(&mut g);
            let logits = m.student_forced_frames(&mut g, batch, frames)?;
            std::hint::black_box(g.value(logits));
            Ok(())
        })?;
        rows.push(row("student", frames, per_video));
    }
    let max_frames = *frame_counts.iter().max().expect("nonempty");
    let reference = rows.iter().find(|r| r.frames == max_frames).map(|r| r.median_ms).unwrap_or(f64::NAN);
    for r in &mut rows {
        r.speedup_vs_max = reference / r.median_ms;
    }
    Ok(rows)
}

/// Teacher pipeline over all frames.
pub fn bench_teacher(model: &Model, data: &Prepared, cfg: &BenchConfig) -> Result<LatencyRow> {
    let mut m = model.clone();
    let per_video = time_batches(data, cfg, |batch| {
        let mut g = Graph::new();
        m.bind_frozen(&mut g);
        let logits = m.teacher_logits(&mut g, batch)?;
        std::hint::black_box(g.value(logits));
        Ok(())
    })?;
    let mut r = row("teacher", model.cfg.data.frames, per_video);
    r.speedup_vs_max = 1.0;
    Ok(r)
}

pub fn write_csv(rows: &[LatencyRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

//! Word-accuracy evaluation and the per-length inference benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::ctc::{greedy_decode, normalize_word};
use crate::error::{Error, Result};
use crate::model::SvtrV2;
use crate::msr::{build_batches, compute_bucket, resize_bilinear, BucketId, Charset, RawSample, ResizeMode};
use crate::nn::ParamStore;
use crate::synth::profile_of;
use crate::tensor::Tensor;

/// Worker cap from `SVTR2_THREADS`, default 1.
pub fn worker_count() -> usize {
    std::env::var("SVTR2_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub text: String,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub source_id: String,
    pub bucket: BucketId,
    pub profile: String,
    pub reference: String,
    pub prediction: String,
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += usize::from(ok);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: Tally,
    pub per_bucket: BTreeMap<BucketId, Tally>,
    pub per_profile: BTreeMap<String, Tally>,
    /// In input order.
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,key,correct,total,accuracy\n");
        let mut row = |scope: &str, key: &str, t: &Tally| {
            let _ = writeln!(s, "{scope},{key},{},{},{:.6}", t.correct, t.total, t.accuracy());
        };
        row("overall", "all", &self.overall);
        for (b, t) in &self.per_bucket {
            row("bucket", &b.to_string(), t);
        }
        for (p, t) in &self.per_profile {
            row("profile", p, t);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Greedy predictions for samples that share one target size.
pub fn predict_batch(
    model: &SvtrV2,
    store: &ParamStore<f32>,
    charset: &Charset,
    samples: &[&RawSample],
    target: (usize, usize),
) -> Result<Vec<Prediction>> {
    let resized: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| resize_bilinear(&s.image, target))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<f32>> = resized.iter().collect();
    let logits = model.logits(store, &refs)?;
    let (frames, classes) = (logits.shape()[1], logits.shape()[2]);
    logits
        .data()
        .chunks(frames * classes)
        .map(|chunk| {
            let t = Tensor::new(&[frames, classes], chunk.to_vec())?;
            let d = greedy_decode(&t)?;
            Ok(Prediction {
                text: charset.decode(&d.indices),
                confidence: d.confidence,
            })
        })
        .collect()
}

/// Predictions in input order, batched by target size and spread over
/// [`worker_count`] threads.
pub fn predict_all(
    model: &SvtrV2,
    store: &ParamStore<f32>,
    charset: &Charset,
    samples: &[RawSample],
    mode: ResizeMode,
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    if samples.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let manifest = build_batches(samples, batch_size, 0, mode)?;
    let workers = worker_count().min(manifest.batches.len()).max(1);
    let run = |batches: &[crate::msr::Batch]| -> Result<Vec<(usize, Prediction)>> {
        let mut out = Vec::new();
        for b in batches {
            let group: Vec<&RawSample> = b.ids.iter().map(|&i| &samples[i]).collect();
            let preds = predict_batch(model, store, charset, &group, b.target)?;
            out.extend(b.ids.iter().copied().zip(preds));
        }
        Ok(out)
    };
    let parts: Vec<Result<Vec<(usize, Prediction)>>> = if workers == 1 {
        vec![run(&manifest.batches)]
    } else {
        let chunk = manifest.batches.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = manifest
                .batches
                .chunks(chunk)
                .map(|c| s.spawn(move || run(c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut slots: Vec<Option<Prediction>> = vec![None; samples.len()];
    for part in parts {
        for (i, p) in part? {
            slots[i] = Some(p);
        }
    }
    Ok(slots.into_iter().map(|p| p.expect("every sample batched")).collect())
}

/// Word accuracy overall, per aspect bucket and per generator profile.
pub fn evaluate(
    model: &SvtrV2,
    store: &ParamStore<f32>,
    charset: &Charset,
    samples: &[RawSample],
    mode: ResizeMode,
    batch_size: usize,
) -> Result<EvalReport> {
    let preds = predict_all(model, store, charset, samples, mode, batch_size)?;
    let mut report = EvalReport {
        overall: Tally::default(),
        per_bucket: BTreeMap::new(),
        per_profile: BTreeMap::new(),
        records: Vec::with_capacity(samples.len()),
    };
    for (s, p) in samples.iter().zip(preds) {
        let (h, w) = s.size();
        let bucket = compute_bucket(h, w)?.id;
        let profile = profile_of(&s.source_id).map_or("unknown", |p| p.as_str()).to_string();
        let reference = charset.decode(&s.label);
        let correct = normalize_word(&reference) == normalize_word(&p.text);
        report.overall.add(correct);
        report.per_bucket.entry(bucket).or_default().add(correct);
        report.per_profile.entry(profile.clone()).or_default().add(correct);
        report.records.push(EvalRecord {
            source_id: s.source_id.clone(),
            bucket,
            profile,
            reference,
            prediction: p.text,
            confidence: p.confidence,
            correct,
        });
    }
    Ok(report)
}

/// Measures one inference call in seconds.
pub trait Timer {
    fn measure(&mut self, run: &mut dyn FnMut() -> Result<()>) -> Result<f64>;
}

/// Wall-clock timer.
#[derive(Clone, Copy, Debug, Default)]
pub struct WallTimer;

impl Timer for WallTimer {
    fn measure(&mut self, run: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
        let t0 = Instant::now();
        run()?;
        Ok(t0.elapsed().as_secs_f64())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    /// `(text length, total seconds, count)` for lengths that occurred.
    pub per_length: Vec<(usize, f64, usize)>,
    /// Mean of the per-length average times, in seconds.
    pub mean_time: f64,
    pub fps: f64,
}

impl BenchReport {
    /// Aggregates `(text length, seconds)` pairs: average per length, then
    /// the unweighted mean over lengths that have samples.
    pub fn from_timings(timings: &[(usize, f64)]) -> Result<Self> {
        if timings.is_empty() {
            return Err(Error::Input("no timings to aggregate".into()));
        }
        let max_len = timings.iter().map(|t| t.0).max().unwrap_or(0);
        let mut total = vec![0.0; max_len + 1];
        let mut count = vec![0usize; max_len + 1];
        for &(len, secs) in timings {
            total[len] += secs;
            count[len] += 1;
        }
        let mut per_length = Vec::new();
        let mut sum_avg = 0.0;
        for i in 0..=max_len {
            if count[i] > 0 {
                per_length.push((i, total[i], count[i]));
                sum_avg += total[i] / count[i] as f64;
            }
        }
        let mean_time = sum_avg / per_length.len() as f64;
        Ok(BenchReport {
            per_length,
            mean_time,
            fps: 1.0 / mean_time,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,count,avg_ms\n");
        for (len, total, n) in &self.per_length {
            let _ = writeln!(s, "{len},{n},{:.6}", total / *n as f64 * 1e3);
        }
        let _ = writeln!(s, "mean,,{:.6}", self.mean_time * 1e3);
        s
    }
}

/// Batch-size-1 timing of every sample, grouped by label length.
pub fn bench_inference(
    model: &SvtrV2,
    store: &ParamStore<f32>,
    samples: &[RawSample],
    mode: ResizeMode,
    timer: &mut dyn Timer,
) -> Result<BenchReport> {
    if samples.is_empty() {
        return Err(Error::Input("nothing to benchmark".into()));
    }
    let mut timings = Vec::with_capacity(samples.len());
    for s in samples {
        let (h, w) = s.size();
        let img = resize_bilinear(&s.image, mode.target(h, w)?)?;
        let mut run = || model.logits(store, &[&img]).map(|_| ());
        let secs = timer.measure(&mut run)?;
        timings.push((s.label.len(), secs));
    }
    BenchReport::from_timings(&timings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_length_average_of_averages() {
        let r = BenchReport::from_timings(&[(1, 0.002), (1, 0.004), (3, 0.006)]).unwrap();
        assert_eq!(r.per_length, vec![(1, 0.006, 2), (3, 0.006, 1)]);
        assert!((r.mean_time - 0.0045).abs() < 1e-15);
        assert!((r.fps - 1.0 / 0.0045).abs() < 1e-9);
    }

    #[test]
    fn single_length_is_plain_mean() {
        let r = BenchReport::from_timings(&[(4, 1.0), (4, 2.0), (4, 6.0)]).unwrap();
        assert_eq!(r.mean_time, 3.0);
    }
}

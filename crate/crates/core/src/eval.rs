//! Forecast evaluation: scalar error metrics, per-step statistics over
//! many evaluation windows, extreme-event ranking, point-probe series
//! and 16-bit PGM field rendering.
//!
//! Tables report metrics in normalized units; point series are
//! denormalized to physical units. Both say so in their labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::{DataError, DResult, Normalizer, Series};
use crate::model::OperatorModel;
use crate::train::{TrainError, TrainResult};

pub fn rmse(pred: &[f64], target: &[f64]) -> TrainResult<f64> {
    check_pair(pred, target)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], target: &[f64]) -> TrainResult<f64> {
    check_pair(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// |pred - target|_2 / |target|_2; zero-norm targets are an error.
pub fn rl2(pred: &[f64], target: &[f64]) -> TrainResult<f64> {
    check_pair(pred, target)?;
    let num: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    let den: f64 = target.iter().map(|t| t * t).sum();
    if den == 0.0 {
        return Err(TrainError::Numeric("relative L2 against a zero-norm target".into()));
    }
    Ok((num / den).sqrt())
}

/// Coefficient of determination, 1 - SSE/SST with SST about the target
/// mean; a zero-variance target is an error.
pub fn r2(pred: &[f64], target: &[f64]) -> TrainResult<f64> {
    check_pair(pred, target)?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    let sst: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if sst == 0.0 {
        return Err(TrainError::Numeric("R^2 against a zero-variance target".into()));
    }
    Ok(1.0 - sse / sst)
}

fn check_pair(pred: &[f64], target: &[f64]) -> TrainResult<()> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(TrainError::Format(format!(
            "metric needs equal nonempty arrays, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Mean and population standard deviation of a sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(samples: &[f64]) -> Stat {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub rmse: Stat,
    pub mae: Stat,
    pub rl2: Stat,
    pub r2: Stat,
}

impl StepMetrics {
    pub fn metric(&self, name: &str) -> Option<Stat> {
        match name {
            "rmse" => Some(self.rmse),
            "mae" => Some(self.mae),
            "rl2" => Some(self.rl2),
            "r2" => Some(self.r2),
            _ => None,
        }
    }
}

/// Rolls the model out n steps from every window and aggregates each
/// metric per step across windows (normalized units).
pub fn evaluate_rollout(
    model: &OperatorModel,
    series: &Series,
    windows: &[usize],
    n: usize,
) -> TrainResult<Vec<StepMetrics>> {
    if windows.is_empty() {
        return Err(TrainError::Format("no evaluation windows".into()));
    }
    let k = model.config.history_k;
    let cells = series.h * series.w;
    // Parallel over windows; regrouped in window order afterwards so the
    // statistics do not depend on the thread count.
    let rows: Vec<TrainResult<Vec<[f64; 4]>>> = windows
        .par_iter()
        .map(|&start| {
            let hist = series.stack(start, k)?;
            let preds = model.rollout(&hist, n)?;
            let targets = series.stack(start + k, n)?;
            let mut row = Vec::with_capacity(n);
            for step in 0..n {
                let p = &preds.real_data()[step * cells..(step + 1) * cells];
                let t = &targets.real_data()[step * cells..(step + 1) * cells];
                row.push([rmse(p, t)?, mae(p, t)?, rl2(p, t)?, r2(p, t)?]);
            }
            Ok(row)
        })
        .collect();
    let mut per_step: Vec<[Vec<f64>; 4]> = (0..n)
        .map(|_| [Vec::new(), Vec::new(), Vec::new(), Vec::new()])
        .collect();
    for row in rows {
        for (step, metrics) in row?.into_iter().enumerate() {
            for (m, &value) in metrics.iter().enumerate() {
                per_step[step][m].push(value);
            }
        }
    }
    Ok(per_step
        .iter()
        .map(|m| StepMetrics {
            rmse: Stat::of(&m[0]),
            mae: Stat::of(&m[1]),
            rl2: Stat::of(&m[2]),
            r2: Stat::of(&m[3]),
        })
        .collect())
}

/// Plain-text table of mean (std) cells.
pub struct MetricTable {
    pub title: String,
    pub columns: Vec<String>,
    rows: Vec<(String, Vec<Stat>)>,
}

impl MetricTable {
    pub fn new(title: impl Into<String>, columns: Vec<String>) -> MetricTable {
        MetricTable { title: title.into(), columns, rows: Vec::new() }
    }

    pub fn push_row(&mut self, label: impl Into<String>, stats: Vec<Stat>) {
        assert_eq!(stats.len(), self.columns.len(), "row width must match columns");
        self.rows.push((label.into(), stats));
    }

    pub fn render(&self) -> String {
        let cell = |s: &Stat| format!("{:.3} ({:.3})", s.mean, s.std);
        let label_w = self
            .rows
            .iter()
            .map(|(l, _)| l.len())
            .chain(std::iter::once(0))
            .max()
            .unwrap()
            .max(5);
        let mut col_w: Vec<usize> = self.columns.iter().map(|c| c.len()).collect();
        for (_, stats) in &self.rows {
            for (i, s) in stats.iter().enumerate() {
                col_w[i] = col_w[i].max(cell(s).len());
            }
        }
        let mut out = String::new();
        out.push_str(&self.title);
        out.push('\n');
        out.push_str(&format!("{:label_w$}", ""));
        for (c, w) in self.columns.iter().zip(&col_w) {
            out.push_str(&format!("  {c:>w$}"));
        }
        out.push('\n');
        for (label, stats) in &self.rows {
            out.push_str(&format!("{label:label_w$}"));
            for (s, w) in stats.iter().zip(&col_w) {
                let c = cell(s);
                out.push_str(&format!("  {c:>w$}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Table of one metric across rollout steps, one row per labeled run.
pub fn rollout_table(
    title: impl Into<String>,
    metric: &str,
    entries: &[(String, &[StepMetrics])],
) -> TrainResult<MetricTable> {
    let n = entries.first().map(|(_, m)| m.len()).unwrap_or(0);
    if n == 0 || entries.iter().any(|(_, m)| m.len() != n) {
        return Err(TrainError::Format("rollout table needs equal nonempty step counts".into()));
    }
    let columns = (1..=n).map(|i| format!("step {i}")).collect();
    let mut table = MetricTable::new(title, columns);
    for (label, metrics) in entries {
        let stats: Vec<Stat> = metrics
            .iter()
            .map(|m| {
                m.metric(metric)
                    .ok_or_else(|| TrainError::Format(format!("unknown metric {metric}")))
            })
            .collect::<TrainResult<_>>()?;
        table.push_row(label.clone(), stats);
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtremeEvent {
    pub frame: usize,
    pub timestamp: i64,
    pub total: f64,
}

/// Frames ranked by spatial sum, largest first; equal sums break toward
/// the earlier timestamp. `hours` filters by UTC hour of day, inclusive
/// on both ends and allowed to wrap midnight (e.g. (22, 4)).
pub fn extreme_events(series: &Series, k: usize, hours: Option<(u8, u8)>) -> Vec<ExtremeEvent> {
    let mut events: Vec<ExtremeEvent> = (0..series.t())
        .filter(|&f| match hours {
            None => true,
            Some((lo, hi)) => {
                let h = (series.timestamps[f].rem_euclid(86_400) / 3_600) as u8;
                if lo <= hi {
                    h >= lo && h <= hi
                } else {
                    h >= lo || h <= hi
                }
            }
        })
        .map(|f| ExtremeEvent {
            frame: f,
            timestamp: series.timestamps[f],
            total: series.frame(f).iter().sum(),
        })
        .collect();
    events.sort_by(|a, b| {
        b.total
            .partial_cmp(&a.total)
            .expect("series values are finite")
            .then(a.timestamp.cmp(&b.timestamp))
    });
    events.truncate(k);
    events
}

/// Rollout at one grid point: (timestamp, predicted, actual) triples in
/// physical units, denormalized through `nrm`.
pub fn point_series(
    model: &OperatorModel,
    series: &Series,
    nrm: &Normalizer,
    window_start: usize,
    n: usize,
    point: (usize, usize),
) -> TrainResult<Vec<(i64, f64, f64)>> {
    let (pi, pj) = point;
    if pi >= series.h || pj >= series.w {
        return Err(TrainError::Format(format!("point ({pi}, {pj}) outside the grid")));
    }
    let k = model.config.history_k;
    let hist = series.stack(window_start, k)?;
    let preds = model.rollout(&hist, n)?;
    let cells = series.h * series.w;
    let mut rows = Vec::with_capacity(n);
    for step in 0..n {
        let frame = window_start + k + step;
        if frame >= series.t() {
            return Err(TrainError::Format(format!(
                "rollout step {step} runs past the series ({} frames)",
                series.t()
            )));
        }
        let pred = nrm.invert(preds.real_data()[step * cells + pi * series.w + pj]);
        let actual = nrm.invert(series.frame(frame)[pi * series.w + pj]);
        rows.push((series.timestamps[frame], pred, actual));
    }
    Ok(rows)
}

/// Binary 16-bit PGM (P5, maxval 65535, big-endian samples) with the
/// value range recorded in a header comment. Values are mapped linearly
/// from [vmin, vmax] and clamped.
pub fn write_pgm16(path: &Path, h: usize, w: usize, data: &[f64], vmin: f64, vmax: f64) -> DResult<()> {
    if data.len() != h * w {
        return Err(DataError::Format(format!("{} values for {h}x{w} image", data.len())));
    }
    if !(vmax > vmin) {
        return Err(DataError::Format(format!("bad value range [{vmin}, {vmax}]")));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n# vmin={vmin} vmax={vmax}\n{w} {h}\n65535\n")?;
    for &v in data {
        let unit = ((v - vmin) / (vmax - vmin)).clamp(0.0, 1.0);
        let q = (unit * 65535.0).round() as u16;
        out.write_all(&q.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads back a PGM written by `write_pgm16`: dimensions, samples, and
/// the recorded range when present.
pub fn read_pgm16(path: &Path) -> DResult<(usize, usize, Vec<u16>, Option<(f64, f64)>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;

    // Header tokens separated by whitespace; # starts a comment line.
    let mut pos = 0usize;
    let mut range = None;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(DataError::Format("truncated PGM header".into()));
        }
        if bytes[pos] == b'#' {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map(|e| pos + e).unwrap_or(bytes.len());
            let comment = String::from_utf8_lossy(&bytes[pos + 1..end]).to_string();
            let mut vmin = None;
            let mut vmax = None;
            for part in comment.split_whitespace() {
                if let Some(v) = part.strip_prefix("vmin=") {
                    vmin = v.parse::<f64>().ok();
                }
                if let Some(v) = part.strip_prefix("vmax=") {
                    vmax = v.parse::<f64>().ok();
                }
            }
            if let (Some(a), Some(b)) = (vmin, vmax) {
                range = Some((a, b));
            }
            pos = end;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    if tokens[0] != "P5" {
        return Err(DataError::Format(format!("not a P5 PGM: {}", tokens[0])));
    }
    let w: usize = tokens[1].parse().map_err(|_| DataError::Format("bad width".into()))?;
    let h: usize = tokens[2].parse().map_err(|_| DataError::Format("bad height".into()))?;
    if tokens[3] != "65535" {
        return Err(DataError::Format(format!("expected maxval 65535, got {}", tokens[3])));
    }
    pos += 1; // single whitespace after maxval
    let need = h * w * 2;
    if bytes.len() - pos != need {
        return Err(DataError::Format(format!(
            "payload is {} bytes, expected {need}",
            bytes.len() - pos
        )));
    }
    let samples = bytes[pos..]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((h, w, samples, range))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Normalizer;
    use crate::model::{Activation, Flavor, ModelConfig};
    use crate::rng::Rng;
    use crate::synth;

    fn tiny_model(h: usize, w: usize, seed: u64) -> OperatorModel {
        let config = ModelConfig {
            flavor: Flavor::Fno,
            history_k: 3,
            modes: 2,
            width: 2,
            n_layers: 1,
            projection_hidden: 3,
            append_coords: false,
            activation: Activation::SplitGelu,
        };
        OperatorModel::new(config, h, w, seed).unwrap()
    }

    fn toy_series(h: usize, w: usize, t: usize) -> (Series, Normalizer) {
        let mut cfg = synth::urban_toy();
        cfg.h = h;
        cfg.w = w;
        let n = h * w;
        cfg.vel_row = vec![0.3; n];
        cfg.vel_col = vec![-0.2; n];
        cfg.init = vec![0.0; n];
        cfg.sources = vec![synth::SourceSpec { i: h / 2, j: w / 2, base: 1.0, amp: 0.7, phase: 3.0 }];
        cfg.georef = None;
        let series = synth::generate(&cfg, t).unwrap();
        let nrm = Normalizer::fit(series.values.iter().copied()).unwrap();
        (nrm.apply_series(&series).unwrap(), nrm)
    }

    #[test]
    fn metrics_match_independent_oracles() {
        let mut rng = Rng::from_seed(51);
        for _ in 0..50 {
            let n = 1 + rng.below(40);
            let p: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();

            let mut sq = 0.0;
            let mut ab = 0.0;
            let mut tsq = 0.0;
            for i in 0..n {
                sq += (p[i] - t[i]).powi(2);
                ab += (p[i] - t[i]).abs();
                tsq += t[i] * t[i];
            }
            let tmean = t.iter().sum::<f64>() / n as f64;
            let tvar: f64 = t.iter().map(|x| (x - tmean).powi(2)).sum();

            assert!((rmse(&p, &t).unwrap() - (sq / n as f64).sqrt()).abs() < 1e-12);
            assert!((mae(&p, &t).unwrap() - ab / n as f64).abs() < 1e-12);
            if tsq > 0.0 {
                assert!((rl2(&p, &t).unwrap() - (sq / tsq).sqrt()).abs() < 1e-12);
            }
            if tvar > 0.0 {
                assert!((r2(&p, &t).unwrap() - (1.0 - sq / tvar)).abs() < 1e-12);
            }
        }

        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
        assert!(rl2(&[1.0], &[0.0]).is_err());
        assert!(r2(&[1.0, 2.0], &[3.0, 3.0]).is_err());
        // Perfect prediction: rmse 0, r2 1.
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(r2(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn stat_mean_and_population_std() {
        let s = Stat::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert!((s.mean - 5.0).abs() < 1e-15);
        assert!((s.std - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rollout_evaluation_stats_and_prefix_property() {
        let (series, _) = toy_series(8, 8, 24);
        let model = tiny_model(8, 8, 61);
        let windows = [0usize, 2, 5];
        let long = evaluate_rollout(&model, &series, &windows, 4).unwrap();
        let short = evaluate_rollout(&model, &series, &windows, 2).unwrap();
        assert_eq!(long.len(), 4);
        for step in 0..2 {
            assert_eq!(long[step].rl2.mean.to_bits(), short[step].rl2.mean.to_bits());
            assert_eq!(long[step].rmse.std.to_bits(), short[step].rmse.std.to_bits());
        }

        // Cross-check one cell against a direct computation.
        let hist = series.stack(2, 3).unwrap();
        let preds = model.rollout(&hist, 1).unwrap();
        let target = series.stack(5, 1).unwrap();
        let direct = rl2(preds.real_data(), target.real_data()).unwrap();
        let mut all = Vec::new();
        for &s in &windows {
            let h = series.stack(s, 3).unwrap();
            let p = model.rollout(&h, 1).unwrap();
            let t = series.stack(s + 3, 1).unwrap();
            all.push(rl2(p.real_data(), t.real_data()).unwrap());
        }
        assert!((all[1] - direct).abs() < 1e-15);
        let stat = Stat::of(&all);
        assert!((long[0].rl2.mean - stat.mean).abs() < 1e-14);
    }

    #[test]
    fn extreme_event_ranking_with_ties_and_hour_filters() {
        // Frame sums: 5, 9, 9, 1, 7 at hours 0, 1, 2, 3, 4.
        let sums = [5.0, 9.0, 9.0, 1.0, 7.0];
        let mut values = Vec::new();
        for &s in &sums {
            values.extend_from_slice(&[s / 4.0; 4]);
        }
        let timestamps: Vec<i64> = (0..5).map(|i| i * 3600).collect();
        let series = Series::new(2, 2, timestamps, values, None).unwrap();

        let top = extreme_events(&series, 3, None);
        assert_eq!(top.len(), 3);
        // The two 9s tie; the earlier timestamp (frame 1) must lead.
        assert_eq!(top[0].frame, 1);
        assert_eq!(top[1].frame, 2);
        assert_eq!(top[2].frame, 4);
        assert!((top[0].total - 9.0).abs() < 1e-12);

        let night = extreme_events(&series, 10, Some((3, 4)));
        assert_eq!(night.iter().map(|e| e.frame).collect::<Vec<_>>(), vec![4, 3]);

        // Wrapped range 23..=0 keeps only hour 0.
        let wrap = extreme_events(&series, 10, Some((23, 0)));
        assert_eq!(wrap.iter().map(|e| e.frame).collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn extreme_events_match_brute_force_on_random_series() {
        let mut rng = Rng::from_seed(52);
        for _ in 0..10 {
            let t = 12 + rng.below(20);
            let timestamps: Vec<i64> = (0..t as i64).map(|i| 1_700_000_000 + 3600 * i).collect();
            let values: Vec<f64> = (0..t * 9).map(|_| rng.uniform(0.0, 5.0)).collect();
            let series = Series::new(3, 3, timestamps, values, None).unwrap();
            let k = 1 + rng.below(5);
            let got = extreme_events(&series, k, None);

            let mut sums: Vec<(usize, f64)> =
                (0..t).map(|f| (f, series.frame(f).iter().sum())).collect();
            sums.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (i, e) in got.iter().enumerate() {
                assert_eq!(e.frame, sums[i].0);
                assert!((e.total - sums[i].1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn point_probe_rows_denormalize_against_truth() {
        let (series, nrm) = toy_series(8, 8, 20);
        let model = tiny_model(8, 8, 62);
        let rows = point_series(&model, &series, &nrm, 1, 3, (4, 4)).unwrap();
        assert_eq!(rows.len(), 3);

        let hist = series.stack(1, 3).unwrap();
        let preds = model.rollout(&hist, 3).unwrap();
        for (step, &(ts, pred, actual)) in rows.iter().enumerate() {
            assert_eq!(ts, series.timestamps[1 + 3 + step]);
            let want_pred = nrm.invert(preds.real_data()[step * 64 + 4 * 8 + 4]);
            let want_actual = nrm.invert(series.frame(4 + step)[4 * 8 + 4]);
            assert!((pred - want_pred).abs() < 1e-15);
            assert!((actual - want_actual).abs() < 1e-15);
        }

        assert!(point_series(&model, &series, &nrm, 1, 3, (9, 0)).is_err());
        assert!(point_series(&model, &series, &nrm, 16, 3, (0, 0)).is_err());
    }

    #[test]
    fn pgm16_round_trip_and_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.pgm");
        let data = vec![0.0, 0.5, 1.0, 2.0, -1.0, 0.25];
        write_pgm16(&path, 2, 3, &data, 0.0, 1.0).unwrap();
        let (h, w, samples, range) = read_pgm16(&path).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(range, Some((0.0, 1.0)));
        assert_eq!(samples[0], 0);
        assert_eq!(samples[1], 32768); // 0.5*65535 rounds up
        assert_eq!(samples[2], 65535);
        assert_eq!(samples[3], 65535, "above-range values clamp");
        assert_eq!(samples[4], 0, "below-range values clamp");
        assert_eq!(samples[5], 16384);

        let header = std::fs::read(&path).unwrap();
        assert!(header.starts_with(b"P5\n# vmin=0 vmax=1\n3 2\n65535\n"));

        assert!(write_pgm16(&path, 2, 3, &data, 1.0, 1.0).is_err());
        assert!(write_pgm16(&path, 2, 2, &data, 0.0, 1.0).is_err());
    }

    #[test]
    fn metric_table_renders_mean_std_cells() {
        let mut table = MetricTable::new(
            "relative L2 by step (normalized units)",
            vec!["step 1".into(), "step 2".into()],
        );
        table.push_row(
            "FNO(6)",
            vec![Stat { mean: 0.138, std: 0.042 }, Stat { mean: 0.21, std: 0.05 }],
        );
        table.push_row(
            "CoNOAir(6)",
            vec![Stat { mean: 0.125, std: 0.04 }, Stat { mean: 0.2005, std: 0.0554 }],
        );
        let text = table.render();
        assert!(text.contains("0.138 (0.042)"), "{text}");
        assert!(text.contains("0.201 (0.055)"), "rounding to three decimals: {text}");
        assert!(text.contains("FNO(6)"));
        assert!(text.contains("step 2"));
        let widths: std::collections::HashSet<usize> =
            text.lines().skip(1).map(|l| l.len()).collect();
        assert_eq!(widths.len(), 1, "all table lines should align: {text}");
    }

    #[test]
    fn rollout_table_requires_consistent_steps() {
        let (series, _) = toy_series(8, 8, 24);
        let model = tiny_model(8, 8, 63);
        let m = evaluate_rollout(&model, &series, &[0, 1], 2).unwrap();
        let table = rollout_table("rl2", "rl2", &[("FNO(2)".into(), &m[..])]).unwrap();
        assert_eq!(table.columns, vec!["step 1", "step 2"]);
        assert!(rollout_table("x", "nope", &[("a".into(), &m[..])]).is_err());
        assert!(rollout_table("x", "rl2", &[]).is_err());
    }
}

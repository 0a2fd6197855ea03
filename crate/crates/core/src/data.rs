//! Gridded frame-series storage and the windowing/normalization steps
//! between raw data and model tensors.
//!
//! On-disk format (GSF): magic "GSF1", u32 version, u64 T/H/W, one
//! georeference flag byte followed by lat0/lon0/dlat/dlon as f64 when
//! set, T i64 unix timestamps, then T*H*W f32 values row-major per
//! frame. All integers and floats little-endian. Values are f32 on disk
//! and f64 in memory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const GSF_MAGIC: &[u8; 4] = b"GSF1";
pub const GSF_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

pub type DResult<T> = std::result::Result<T, DataError>;

fn format_err<T>(msg: impl Into<String>) -> DResult<T> {
    Err(DataError::Format(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Georef {
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
}

/// A time series of H x W frames with per-frame timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub h: usize,
    pub w: usize,
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
    pub georef: Option<Georef>,
}

impl Series {
    pub fn new(
        h: usize,
        w: usize,
        timestamps: Vec<i64>,
        values: Vec<f64>,
        georef: Option<Georef>,
    ) -> DResult<Series> {
        if h == 0 || w == 0 {
            return format_err("frame dimensions must be positive");
        }
        if values.len() != timestamps.len() * h * w {
            return format_err(format!(
                "value count {} does not match {} frames of {h}x{w}",
                values.len(),
                timestamps.len()
            ));
        }
        if timestamps.windows(2).any(|p| p[1] <= p[0]) {
            return format_err("timestamps must be strictly increasing");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return format_err("non-finite value in series");
        }
        Ok(Series { h, w, timestamps, values, georef })
    }

    pub fn t(&self) -> usize {
        self.timestamps.len()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.values[i * n..(i + 1) * n]
    }

    /// Frames [start, start+k) stacked as a real (k,H,W) tensor.
    pub fn stack(&self, start: usize, k: usize) -> DResult<Tensor> {
        if start + k > self.t() {
            return format_err(format!(
                "frames [{start}, {}) exceed series length {}",
                start + k,
                self.t()
            ));
        }
        let n = self.h * self.w;
        let data = self.values[start * n..(start + k) * n].to_vec();
        Tensor::real(&[k, self.h, self.w], data)
            .map_err(|e| DataError::Format(format!("stack: {e}")))
    }

    /// Same series with every value passed through `f`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> DResult<Series> {
        Series::new(
            self.h,
            self.w,
            self.timestamps.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
            self.georef,
        )
    }
}

pub fn write_gsf(path: &Path, series: &Series) -> DResult<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(GSF_MAGIC)?;
    out.write_all(&GSF_VERSION.to_le_bytes())?;
    out.write_all(&(series.t() as u64).to_le_bytes())?;
    out.write_all(&(series.h as u64).to_le_bytes())?;
    out.write_all(&(series.w as u64).to_le_bytes())?;
    match series.georef {
        Some(g) => {
            out.write_all(&[1u8])?;
            for v in [g.lat0, g.lon0, g.dlat, g.dlon] {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        None => out.write_all(&[0u8])?,
    }
    for &ts in &series.timestamps {
        out.write_all(&ts.to_le_bytes())?;
    }
    for &v in &series.values {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_exact_buf<const N: usize>(r: &mut impl Read, what: &str) -> DResult<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| DataError::Format(format!("truncated file while reading {what}")))?;
    Ok(buf)
}

pub fn read_gsf(path: &Path) -> DResult<Series> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact_buf::<4>(&mut r, "magic")?;
    if &magic != GSF_MAGIC {
        return format_err(format!("bad magic {magic:?}, not a GSF file"));
    }
    let version = u32::from_le_bytes(read_exact_buf::<4>(&mut r, "version")?);
    if version != GSF_VERSION {
        return format_err(format!("unsupported GSF version {version}"));
    }
    let t = u64::from_le_bytes(read_exact_buf::<8>(&mut r, "T")?) as usize;
    let h = u64::from_le_bytes(read_exact_buf::<8>(&mut r, "H")?) as usize;
    let w = u64::from_le_bytes(read_exact_buf::<8>(&mut r, "W")?) as usize;
    let total = t
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| DataError::Format("T*H*W overflows".into()))?;
    let flag = read_exact_buf::<1>(&mut r, "georef flag")?[0];
    let georef = match flag {
        0 => None,
        1 => {
            let lat0 = f64::from_le_bytes(read_exact_buf::<8>(&mut r, "lat0")?);
            let lon0 = f64::from_le_bytes(read_exact_buf::<8>(&mut r, "lon0")?);
            let dlat = f64::from_le_bytes(read_exact_buf::<8>(&mut r, "dlat")?);
            let dlon = f64::from_le_bytes(read_exact_buf::<8>(&mut r, "dlon")?);
            Some(Georef { lat0, lon0, dlat, dlon })
        }
        other => return format_err(format!("bad georef flag {other}")),
    };
    let mut timestamps = Vec::with_capacity(t);
    for _ in 0..t {
        timestamps.push(i64::from_le_bytes(read_exact_buf::<8>(&mut r, "timestamp")?));
    }
    let mut values = Vec::with_capacity(total);
    let mut payload = vec![0u8; total * 4];
    r.read_exact(&mut payload)
        .map_err(|_| DataError::Format("truncated file while reading values".into()))?;
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return format_err("non-finite value in file");
        }
        values.push(v as f64);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return format_err("trailing bytes after value payload");
    }
    Series::new(h, w, timestamps, values, georef)
}

/// Number of stride-1 windows of `k` inputs plus `n` targets in `t`
/// frames, or None when the series is too short.
pub fn window_count(t: usize, k: usize, n: usize) -> Option<usize> {
    t.checked_sub(k + n).map(|d| d + 1)
}

/// Start indices of all windows; window i covers input frames
/// [i, i+k) and target frames [i+k, i+k+n).
pub fn make_windows(t: usize, k: usize, n: usize) -> DResult<Vec<usize>> {
    if k == 0 || n == 0 {
        return format_err("windows need k >= 1 input and n >= 1 target frames");
    }
    match window_count(t, k, n) {
        Some(c) => Ok((0..c).collect()),
        None => format_err(format!("{t} frames cannot fit a window of {k}+{n}")),
    }
}

/// Min-max scaling to [0, 1] over the fitted range. Application never
/// clips, so out-of-range values at evaluation time land outside [0, 1]
/// and invert() still recovers them exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub vmin: f64,
    pub vmax: f64,
}

impl Normalizer {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> DResult<Normalizer> {
        let mut vmin = f64::INFINITY;
        let mut vmax = f64::NEG_INFINITY;
        let mut any = false;
        for v in values {
            if !v.is_finite() {
                return format_err("non-finite value while fitting normalizer");
            }
            vmin = vmin.min(v);
            vmax = vmax.max(v);
            any = true;
        }
        if !any {
            return format_err("cannot fit normalizer on empty data");
        }
        if vmax <= vmin {
            return format_err(format!("degenerate value range [{vmin}, {vmax}]"));
        }
        Ok(Normalizer { vmin, vmax })
    }

    /// Fits on exactly the frames covered by the given training windows
    /// (k inputs + n targets each); frames outside them do not leak in.
    pub fn fit_windows(series: &Series, starts: &[usize], k: usize, n: usize) -> DResult<Normalizer> {
        let span = k + n;
        let mut covered = vec![false; series.t()];
        for &s in starts {
            if s + span > series.t() {
                return format_err(format!("window at {s} exceeds series length {}", series.t()));
            }
            covered[s..s + span].iter_mut().for_each(|c| *c = true);
        }
        let vals = covered
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .flat_map(|(i, _)| series.frame(i).iter().copied());
        Normalizer::fit(vals)
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.vmin) / (self.vmax - self.vmin)
    }

    pub fn invert(&self, y: f64) -> f64 {
        self.vmin + y * (self.vmax - self.vmin)
    }

    pub fn apply_series(&self, series: &Series) -> DResult<Series> {
        series.map_values(|v| self.apply(v))
    }

    pub fn invert_tensor(&self, t: &Tensor) -> Tensor {
        Tensor::real(t.shape(), t.real_data().iter().map(|&v| self.invert(v)).collect())
            .expect("affine map of finite values stays finite")
    }
}

/// Seeded disjoint train/validation split over 0..n.
pub fn shuffle_split(
    n: usize,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> DResult<(Vec<usize>, Vec<usize>)> {
    if n_train + n_val > n {
        return format_err(format!("cannot draw {n_train}+{n_val} indices from {n}"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::stream(seed, "shuffle-split");
    // Fisher-Yates, descending.
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    Ok((train, val))
}

/// Grid cell nearest to (lat, lon) by coordinate rounding; equals the
/// brute-force nearest grid point. Errors outside the grid or without
/// georeferencing.
pub fn grid_index_of(series: &Series, lat: f64, lon: f64) -> DResult<(usize, usize)> {
    let g = match series.georef {
        Some(g) => g,
        None => return format_err("series carries no georeference"),
    };
    if g.dlat == 0.0 || g.dlon == 0.0 {
        return format_err("degenerate georeference spacing");
    }
    let fi = (lat - g.lat0) / g.dlat;
    let fj = (lon - g.lon0) / g.dlon;
    let i = fi.round();
    let j = fj.round();
    if i < 0.0 || j < 0.0 || i >= series.h as f64 || j >= series.w as f64 {
        return format_err(format!("({lat}, {lon}) falls outside the {}x{} grid", series.h, series.w));
    }
    Ok((i as usize, j as usize))
}

/// Point time series as CSV with a `timestamp,value` header.
pub fn write_point_csv(path: &Path, rows: &[(i64, f64)]) -> DResult<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "timestamp,value")?;
    for (ts, v) in rows {
        writeln!(out, "{ts},{v}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn f32_values(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-3.0, 9.0) as f32 as f64).collect()
    }

    fn sample_series(rng: &mut Rng, t: usize, h: usize, w: usize, georef: Option<Georef>) -> Series {
        let timestamps: Vec<i64> = (0..t as i64).map(|i| 1_700_000_000 + 3600 * i).collect();
        Series::new(h, w, timestamps, f32_values(rng, t * h * w), georef).unwrap()
    }

    #[test]
    fn gsf_round_trip_is_bit_exact_and_rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::from_seed(1);
        for georef in [None, Some(Georef { lat0: 19.0, lon0: 72.8, dlat: 0.05, dlon: 0.05 })] {
            let series = sample_series(&mut rng, 7, 5, 4, georef);
            let path = dir.path().join("series.gsf");
            write_gsf(&path, &series).unwrap();
            let back = read_gsf(&path).unwrap();
            assert_eq!(series, back);

            let path2 = dir.path().join("series2.gsf");
            write_gsf(&path2, &back).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        }
    }

    #[test]
    fn gsf_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::from_seed(2);
        let series = sample_series(&mut rng, 3, 2, 2, None);
        let path = dir.path().join("ok.gsf");
        write_gsf(&path, &series).unwrap();
        let good = std::fs::read(&path).unwrap();

        let cases: Vec<(&str, Vec<u8>)> = vec![
            ("bad magic", {
                let mut b = good.clone();
                b[0] = b'X';
                b
            }),
            ("bad version", {
                let mut b = good.clone();
                b[4] = 9;
                b
            }),
            ("truncated payload", good[..good.len() - 3].to_vec()),
            ("trailing bytes", {
                let mut b = good.clone();
                b.push(0);
                b
            }),
            ("bad georef flag", {
                let mut b = good.clone();
                b[4 + 4 + 24] = 7;
                b
            }),
        ];
        for (what, bytes) in cases {
            let bad = dir.path().join("bad.gsf");
            std::fs::write(&bad, bytes).unwrap();
            let err = read_gsf(&bad);
            assert!(err.is_err(), "{what} should fail");
            assert!(matches!(err.unwrap_err(), DataError::Format(_)), "{what} should be a format error");
        }
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_count(26, 10, 16), Some(1));
        assert_eq!(window_count(30, 10, 16), Some(5));
        assert_eq!(window_count(25, 10, 16), None);
        assert_eq!(make_windows(28, 10, 16).unwrap(), vec![0, 1, 2]);
        assert!(make_windows(20, 10, 16).is_err());
        assert!(make_windows(20, 0, 1).is_err());
    }

    #[test]
    fn stacked_windows_pick_the_right_frames() {
        let mut rng = Rng::from_seed(3);
        let series = sample_series(&mut rng, 9, 3, 2, None);
        let input = series.stack(2, 4).unwrap();
        assert_eq!(input.shape(), &[4, 3, 2]);
        for f in 0..4 {
            assert_eq!(&input.real_data()[f * 6..(f + 1) * 6], series.frame(2 + f));
        }
        assert!(series.stack(7, 4).is_err());
    }

    #[test]
    fn normalizer_round_trip_and_no_clipping() {
        let nrm = Normalizer::fit([2.0, 5.0, 3.5]).unwrap();
        assert_eq!(nrm.vmin, 2.0);
        assert_eq!(nrm.vmax, 5.0);
        assert!((nrm.apply(2.0) - 0.0).abs() < 1e-15);
        assert!((nrm.apply(5.0) - 1.0).abs() < 1e-15);
        for v in [-4.0, 2.7, 9.9] {
            assert!((nrm.invert(nrm.apply(v)) - v).abs() < 1e-12);
        }
        // Out-of-range values stay out of range.
        assert!(nrm.apply(8.0) > 1.0);
        assert!(nrm.apply(-1.0) < 0.0);

        assert!(Normalizer::fit([]).is_err());
        assert!(Normalizer::fit([4.0, 4.0]).is_err());
    }

    #[test]
    fn normalizer_fit_ignores_frames_outside_training_windows() {
        let h = 2;
        let w = 2;
        let t = 10;
        let mut values = vec![1.0; t * h * w];
        // A spike in frame 9, which no training window covers.
        values[9 * 4] = 1000.0;
        values[0] = 0.5;
        values[5] = 2.5;
        let timestamps: Vec<i64> = (0..t as i64).collect();
        let series = Series::new(h, w, timestamps, values, None).unwrap();
        let nrm = Normalizer::fit_windows(&series, &[0, 2], 2, 3).unwrap();
        assert_eq!(nrm.vmin, 0.5);
        assert_eq!(nrm.vmax, 2.5);
    }

    #[test]
    fn shuffle_split_is_seeded_and_disjoint() {
        let (train, val) = shuffle_split(100, 60, 20, 7).unwrap();
        assert_eq!(train.len(), 60);
        assert_eq!(val.len(), 20);
        let mut seen = std::collections::HashSet::new();
        for &i in train.iter().chain(&val) {
            assert!(i < 100);
            assert!(seen.insert(i), "index {i} duplicated");
        }
        let (train2, val2) = shuffle_split(100, 60, 20, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
        let (train3, _) = shuffle_split(100, 60, 20, 8).unwrap();
        assert_ne!(train, train3, "different seeds should permute differently");

        assert!(shuffle_split(10, 8, 3, 0).is_err());
    }

    #[test]
    fn grid_lookup_matches_brute_force_nearest() {
        let mut rng = Rng::from_seed(4);
        for trial in 0..40 {
            let h = 3 + rng.below(6);
            let w = 3 + rng.below(6);
            let dlat = if trial % 2 == 0 { rng.uniform(0.01, 0.2) } else { -rng.uniform(0.01, 0.2) };
            let dlon = rng.uniform(0.01, 0.2);
            let g = Georef { lat0: rng.uniform(-60.0, 60.0), lon0: rng.uniform(-170.0, 170.0), dlat, dlon };
            let series = sample_series(&mut rng, 2, h, w, Some(g));
            for _ in 0..5 {
                let u = rng.uniform(0.0, (h - 1) as f64);
                let v = rng.uniform(0.0, (w - 1) as f64);
                let lat = g.lat0 + u * g.dlat;
                let lon = g.lon0 + v * g.dlon;
                let got = grid_index_of(&series, lat, lon).unwrap();

                let mut best = (0usize, 0usize);
                let mut best_d = f64::INFINITY;
                for i in 0..h {
                    for j in 0..w {
                        let dl = lat - (g.lat0 + i as f64 * g.dlat);
                        let dn = lon - (g.lon0 + j as f64 * g.dlon);
                        let d = dl * dl + dn * dn;
                        if d < best_d {
                            best_d = d;
                            best = (i, j);
                        }
                    }
                }
                assert_eq!(got, best, "trial {trial} at ({lat}, {lon})");
            }
        }
    }

    #[test]
    fn grid_lookup_rejects_out_of_grid_and_missing_georef() {
        let mut rng = Rng::from_seed(5);
        let g = Georef { lat0: 10.0, lon0: 20.0, dlat: 0.1, dlon: 0.1 };
        let series = sample_series(&mut rng, 2, 4, 4, Some(g));
        assert!(grid_index_of(&series, 10.2, 20.2).is_ok());
        assert!(grid_index_of(&series, 9.0, 20.2).is_err());
        assert!(grid_index_of(&series, 10.2, 21.5).is_err());
        let bare = sample_series(&mut rng, 2, 4, 4, None);
        assert!(grid_index_of(&bare, 10.2, 20.2).is_err());
    }

    #[test]
    fn point_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.csv");
        write_point_csv(&path, &[(1700000000, 0.5), (1700003600, 1.25)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "timestamp,value\n1700000000,0.5\n1700003600,1.25\n");
    }
}

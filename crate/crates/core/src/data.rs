//! Series ingestion and synthesis: delimited-text and binary containers,
//! per-channel standardization, random temporal cropping, and a synthetic
//! generator that plants timestamped events whose channel sign pattern
//! carries the class label.

use crate::diffcore::{Array, Scalar};
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// One labeled multichannel series; `values` is T x N, rows are time.
#[derive(Clone, Debug)]
pub struct RoiTimeSeries {
    pub values: Array<f32>,
    pub label: usize,
    pub meta: Option<String>,
}

// ---- delimited text ----

/// Parse comma-delimited numeric rows (uniform width) into a T x N matrix.
pub fn parse_delimited(text: &str) -> Result<Array<f32>> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut row = Vec::new();
        for (col, cell) in line.split(',').enumerate() {
            let v: f32 = cell.trim().parse().map_err(|_| Error::Parse {
                line: ln + 1,
                field: col + 1,
                msg: format!("non-numeric cell '{}'", cell.trim()),
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    line: ln + 1,
                    field: row.len(),
                    msg: format!(
                        "ragged row: {} columns, expected {}",
                        row.len(),
                        first.len()
                    ),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            field: 1,
            msg: "empty series file".into(),
        });
    }
    let t = rows.len();
    let n = rows[0].len();
    Array::from_vec(&[t, n], rows.concat())
}

/// Write a matrix as comma-delimited text, six significant digits.
pub fn save_text(path: &Path, values: &Array<f32>) -> Result<()> {
    let (t, n) = values.dims();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..t {
        let row: Vec<String> = (0..n)
            .map(|c| format!("{:.5e}", values.data()[r * n + c]))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

// ---- binary container ----

const SERIES_MAGIC: &[u8; 4] = b"FWTS";
const SERIES_VERSION: u32 = 1;

/// Binary layout: magic, version, T, N, label (all u32 LE), then T*N
/// row-major f32 LE values.
pub fn save_binary(path: &Path, series: &RoiTimeSeries) -> Result<()> {
    let (t, n) = series.values.dims();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(SERIES_MAGIC)?;
    for v in [SERIES_VERSION, t as u32, n as u32, series.label as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &v in series.values.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn load_binary(bytes: &[u8], path: &Path) -> Result<RoiTimeSeries> {
    let fail = |msg: &str| Error::Parse {
        line: 1,
        field: 1,
        msg: format!("{}: {}", path.display(), msg),
    };
    if bytes.len() < 20 {
        return Err(fail("truncated container header"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != SERIES_VERSION {
        return Err(fail(&format!("unsupported container version {}", version)));
    }
    let t = u32_at(8) as usize;
    let n = u32_at(12) as usize;
    let label = u32_at(16) as usize;
    let need = 20 + 4 * t * n;
    if bytes.len() != need {
        return Err(fail(&format!(
            "container holds {} bytes, expected {}",
            bytes.len(),
            need
        )));
    }
    let mut data = Vec::with_capacity(t * n);
    for i in 0..t * n {
        let off = 20 + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    Ok(RoiTimeSeries {
        values: Array::from_vec(&[t, n], data)?,
        label,
        meta: path.file_stem().map(|s| s.to_string_lossy().into_owned()),
    })
}

// ---- labels sidecar ----

/// Parse an `id,label` sidecar file into a map keyed by series stem.
pub fn load_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, label) = line.split_once(',').ok_or(Error::Parse {
            line: ln + 1,
            field: 1,
            msg: "expected id,label".into(),
        })?;
        let label: usize = label.trim().parse().map_err(|_| Error::Parse {
            line: ln + 1,
            field: 2,
            msg: format!("invalid label '{}'", label.trim()),
        })?;
        map.insert(id.trim().to_string(), label);
    }
    Ok(map)
}

fn label_from_stem(stem: &str) -> Option<usize> {
    let idx = stem.rfind("_label")?;
    stem[idx + "_label".len()..].parse().ok()
}

/// Load one series. Binary containers carry their label; delimited text
/// resolves it from a `labels.csv` sidecar keyed by file stem, falling
/// back to a `*_label<k>` stem suffix.
pub fn load_series(path: &Path) -> Result<RoiTimeSeries> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.starts_with(SERIES_MAGIC) {
        return load_binary(&bytes, path);
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
        line: 1,
        field: 1,
        msg: format!("{}: neither container nor utf-8 text", path.display()),
    })?;
    let values = parse_delimited(&text)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sidecar = path.with_file_name("labels.csv");
    let label = if sidecar.is_file() {
        let labels = load_labels(&sidecar)?;
        *labels.get(&stem).ok_or_else(|| {
            Error::Config(format!("no label for '{}' in {}", stem, sidecar.display()))
        })?
    } else if let Some(l) = label_from_stem(&stem) {
        l
    } else {
        return Err(Error::Config(format!(
            "no label source for {} (no labels.csv, no _label<k> suffix)",
            path.display()
        )));
    };
    Ok(RoiTimeSeries {
        values,
        label,
        meta: Some(stem),
    })
}

/// Load every `.fwts` and `.csv` series in a directory, sorted by name.
pub fn load_dir(dir: &Path) -> Result<Vec<RoiTimeSeries>> {
    let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("fwts") | Some("csv")
                )
                && p.file_name().and_then(|n| n.to_str()) != Some("labels.csv")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no series files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_series(p)).collect()
}

// ---- standardization ----

/// Standardize each channel to zero mean, unit population variance.
pub fn zscore<S: Scalar>(values: &Array<S>) -> Result<Array<S>> {
    let (t, n) = values.dims();
    let mut out = values.clone();
    for c in 0..n {
        let mut mean = 0.0f64;
        for r in 0..t {
            mean += values.data()[r * n + c].to_f64_lossy();
        }
        mean /= t as f64;
        let mut var = 0.0f64;
        for r in 0..t {
            let d = values.data()[r * n + c].to_f64_lossy() - mean;
            var += d * d;
        }
        var /= t as f64;
        if var < 1e-20 {
            return Err(Error::Numeric(format!(
                "channel {} is constant (variance {:.3e})",
                c, var
            )));
        }
        let inv = 1.0 / var.sqrt();
        for r in 0..t {
            let v = values.data()[r * n + c].to_f64_lossy();
            out.data_mut()[r * n + c] = S::of((v - mean) * inv);
        }
    }
    Ok(out)
}

// ---- temporal cropping ----

/// Contiguous random crop of `len` rows; returns the crop and its onset.
pub fn random_crop<S: Scalar, R: Rng>(
    values: &Array<S>,
    len: usize,
    rng: &mut R,
) -> Result<(Array<S>, usize)> {
    let (t, n) = values.dims();
    if len == 0 || len > t {
        return Err(Error::Contract(format!(
            "crop length {} out of range 1..={}",
            len, t
        )));
    }
    let onset = rng.gen_range(0..=t - len);
    let mut data = Vec::with_capacity(len * n);
    data.extend_from_slice(&values.data()[onset * n..(onset + len) * n]);
    Ok((Array::from_vec(&[len, n], data)?, onset))
}

/// Remap ground-truth event intervals into a crop's local frame,
/// clipping events to the crop and dropping those fully outside.
pub fn shift_events(events: &[(usize, usize)], onset: usize, len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &(start, dur) in events {
        let lo = start.max(onset);
        let hi = (start + dur).min(onset + len);
        if lo < hi {
            out.push((lo - onset, hi - lo));
        }
    }
    out
}

// ---- synthetic generation ----

/// Recipe for planted-event synthesis. Every class shares the event
/// schedule; the per-channel sign pattern of the event response encodes
/// the class, so class evidence exists only inside events.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub t: usize,
    pub n: usize,
    pub num_classes: usize,
    /// Event onset times, shared across classes.
    pub onsets: Vec<usize>,
    /// Event duration in samples.
    pub duration: usize,
    /// Event response magnitude before smoothing and noise.
    pub amplitude: f64,
    /// White-noise standard deviation.
    pub noise: f64,
    /// Causal moving-average width; 1 disables smoothing.
    pub smooth_width: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            t: 60,
            n: 16,
            num_classes: 2,
            onsets: vec![15, 38],
            duration: 4,
            amplitude: 1.25,
            noise: 0.45,
            smooth_width: 3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.n == 0 {
            return Err(Error::Config("series dimensions must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.onsets.is_empty() || self.duration == 0 {
            return Err(Error::Config("need at least one event of length >= 1".into()));
        }
        for &o in &self.onsets {
            if o + self.duration > self.t {
                return Err(Error::Config(format!(
                    "event at {} (duration {}) exceeds series length {}",
                    o, self.duration, self.t
                )));
            }
        }
        let covered: usize = self.event_mask().iter().filter(|&&m| m).count();
        if covered >= self.t {
            return Err(Error::Config(
                "events cover the whole series; signals would be constant".into(),
            ));
        }
        let block = self.num_classes.next_power_of_two();
        if self.n % block != 0 {
            return Err(Error::Config(format!(
                "channel count {} must be a multiple of {} for {} orthogonal class patterns",
                self.n, block, self.num_classes
            )));
        }
        if self.amplitude <= 0.0 || self.noise < 0.0 || self.smooth_width == 0 {
            return Err(Error::Config(
                "amplitude must be positive, noise nonnegative, smooth width >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Ground-truth event intervals as (onset, duration) pairs.
    pub fn events(&self) -> Vec<(usize, usize)> {
        self.onsets.iter().map(|&o| (o, self.duration)).collect()
    }

    /// Boolean per-timepoint event indicator.
    pub fn event_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.t];
        for &o in &self.onsets {
            for m in mask.iter_mut().skip(o).take(self.duration) {
                *m = true;
            }
        }
        mask
    }

    /// Class sign over channels: mutually orthogonal Walsh patterns.
    pub fn loading(&self, class: usize, channel: usize) -> f64 {
        let block = self.num_classes.next_power_of_two();
        if (class & (channel % block)).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// The planted pattern alone: amplitude-scaled class loading inside
/// events, zero elsewhere. No smoothing, noise, or standardization.
pub fn synth_clean(spec: &SynthSpec, class: usize) -> Result<Array<f32>> {
    spec.validate()?;
    if class >= spec.num_classes {
        return Err(Error::Contract(format!(
            "class {} out of range 0..{}",
            class, spec.num_classes
        )));
    }
    let mask = spec.event_mask();
    let mut data = vec![0f32; spec.t * spec.n];
    for (r, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        for c in 0..spec.n {
            data[r * spec.n + c] = (spec.amplitude * spec.loading(class, c)) as f32;
        }
    }
    Array::from_vec(&[spec.t, spec.n], data)
}

/// Causal moving average of width `w` down each column (shrinking at the
/// series start), modeling a lagged, smeared response.
fn smooth_columns(values: &Array<f32>, width: usize) -> Array<f32> {
    if width <= 1 {
        return values.clone();
    }
    let (t, n) = values.dims();
    let mut out = values.clone();
    for c in 0..n {
        for r in 0..t {
            let lo = r.saturating_sub(width - 1);
            let mut acc = 0.0f64;
            for k in lo..=r {
                acc += values.data()[k * n + c] as f64;
            }
            out.data_mut()[r * n + c] = (acc / (r - lo + 1) as f64) as f32;
        }
    }
    out
}

/// Pattern + smoothing + noise, before standardization.
pub fn synth_raw<R: Rng>(spec: &SynthSpec, class: usize, rng: &mut R) -> Result<Array<f32>> {
    let clean = synth_clean(spec, class)?;
    let mut out = smooth_columns(&clean, spec.smooth_width);
    if spec.noise > 0.0 {
        let dist = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in out.data_mut() {
            *v += dist.sample(rng) as f32;
        }
    }
    Ok(out)
}

/// One standardized sample of the given class.
pub fn synth_sample<R: Rng>(spec: &SynthSpec, class: usize, rng: &mut R) -> Result<RoiTimeSeries> {
    let raw = synth_raw(spec, class, rng)?;
    Ok(RoiTimeSeries {
        values: zscore(&raw)?,
        label: class,
        meta: None,
    })
}

/// Draw `n_samples` with uniformly random classes.
pub fn synth_generate<R: Rng>(
    spec: &SynthSpec,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<RoiTimeSeries>> {
    spec.validate()?;
    (0..n_samples)
        .map(|_| {
            let class = rng.gen_range(0..spec.num_classes);
            synth_sample(spec, class, rng)
        })
        .collect()
}

/// Write a train/val dataset tree: `train/` and `val/` of binary series
/// plus a ground-truth `events.csv` (onset,duration per line).
pub fn write_dataset(
    dir: &Path,
    spec: &SynthSpec,
    n_train: usize,
    n_val: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    spec.validate()?;
    let write_split = |sub: &str, samples: &[RoiTimeSeries]| -> Result<()> {
        let split_dir = dir.join(sub);
        std::fs::create_dir_all(&split_dir)?;
        for (i, s) in samples.iter().enumerate() {
            save_binary(&split_dir.join(format!("sample_{:04}.fwts", i)), s)?;
        }
        Ok(())
    };
    write_split("train", &synth_generate(spec, n_train, rng)?)?;
    write_split("val", &synth_generate(spec, n_val, rng)?)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("events.csv"))?);
    writeln!(w, "# onset,duration")?;
    for (o, d) in spec.events() {
        writeln!(w, "{},{}", o, d)?;
    }
    w.flush()?;
    Ok(())
}

/// Read an events.csv ground-truth file back.
pub fn load_events(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (o, d) = line.split_once(',').ok_or(Error::Parse {
            line: ln + 1,
            field: 1,
            msg: "expected onset,duration".into(),
        })?;
        let parse = |s: &str, field: usize| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::Parse {
                line: ln + 1,
                field,
                msg: format!("invalid integer '{}'", s.trim()),
            })
        };
        out.push((parse(o, 1)?, parse(d, 2)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parses_delimited_rows() {
        let a = parse_delimited("1,2\n3,4\n5,6").unwrap();
        assert_eq!(a.dims(), (3, 2));
        assert_eq!(a.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn ragged_row_names_the_row() {
        let err = parse_delimited("1,2\n3\n5,6").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let err = parse_delimited("1,2\n3,oops\n5,6").unwrap_err();
        match err {
            Error::Parse { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, 2);
            }
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn empty_file_is_parse_error() {
        assert!(matches!(
            parse_delimited(""),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_delimited("# only a comment\n"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn binary_container_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.fwts");
        let vals = vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e-7, -123.456, 0.1];
        let series = RoiTimeSeries {
            values: Array::from_vec(&[3, 2], vals.clone()).unwrap(),
            label: 1,
            meta: None,
        };
        save_binary(&path, &series).unwrap();
        let back = load_series(&path).unwrap();
        assert_eq!(back.label, 1);
        for (a, b) in back.values.data().iter().zip(&vals) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_identity(
            t in 1usize..6,
            n in 1usize..5,
            label in 0usize..4,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = Array::<f32>::randn(&[t, n], 2.0, &mut rng);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.fwts");
            save_binary(&path, &RoiTimeSeries { values: values.clone(), label, meta: None }).unwrap();
            let back = load_series(&path).unwrap();
            prop_assert_eq!(back.label, label);
            prop_assert_eq!(back.values.dims(), (t, n));
            for (a, b) in back.values.data().iter().zip(values.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncated_container_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fwts");
        std::fs::write(&path, b"FWTS\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_series(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn text_series_resolves_label_from_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("scan7.csv"), "1,2\n3,4\n").unwrap();
        std::fs::write(dir.path().join("labels.csv"), "scan7,1\nother,0\n").unwrap();
        let s = load_series(&dir.path().join("scan7.csv")).unwrap();
        assert_eq!(s.label, 1);
        assert_eq!(s.meta.as_deref(), Some("scan7"));
    }

    #[test]
    fn text_series_falls_back_to_stem_convention() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("subj3_label2.csv");
        std::fs::write(&path, "1,2\n3,4\n").unwrap();
        assert_eq!(load_series(&path).unwrap().label, 2);
        let bare = dir.path().join("nolabel.csv");
        std::fs::write(&bare, "1,2\n").unwrap();
        assert!(load_series(&bare).is_err());
    }

    #[test]
    fn save_text_load_round_trip_within_print_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t_label0.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values = Array::<f32>::randn(&[4, 3], 1.0, &mut rng);
        save_text(&path, &values).unwrap();
        let back = load_series(&path).unwrap();
        for (a, b) in back.values.data().iter().zip(values.data()) {
            assert!((a - b).abs() <= 1e-4 * b.abs() + 1e-9);
        }
    }

    #[test]
    fn zscore_matches_closed_form() {
        let a = Array::from_vec(&[3, 1], vec![1.0f32, 2.0, 3.0]).unwrap();
        let z = zscore(&a).unwrap();
        let want = [-1.22474, 0.0, 1.22474];
        for (v, w) in z.data().iter().zip(want.iter()) {
            assert!((v - w).abs() < 1e-4, "{} vs {}", v, w);
        }
    }

    #[test]
    fn zscore_standardizes_every_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = Array::<f32>::randn(&[200, 5], 3.0, &mut rng);
        for (i, v) in a.data_mut().iter_mut().enumerate() {
            *v += (i % 5) as f32 * 10.0;
        }
        let z = zscore(&a).unwrap();
        let (t, n) = z.dims();
        for c in 0..n {
            let mean: f64 = (0..t).map(|r| z.data()[r * n + c] as f64).sum::<f64>() / t as f64;
            let var: f64 = (0..t)
                .map(|r| (z.data()[r * n + c] as f64 - mean).powi(2))
                .sum::<f64>()
                / t as f64;
            assert!(mean.abs() < 1e-6, "channel {} mean {}", c, mean);
            assert!((var - 1.0).abs() < 1e-4, "channel {} var {}", c, var);
        }
    }

    #[test]
    fn zscore_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array::<f32>::randn(&[50, 4], 2.5, &mut rng);
        let z1 = zscore(&a).unwrap();
        let z2 = zscore(&z1).unwrap();
        for (x, y) in z1.data().iter().zip(z2.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_is_rejected() {
        let a = Array::from_vec(&[3, 2], vec![1.0f32, 7.0, 2.0, 7.0, 3.0, 7.0]).unwrap();
        assert!(matches!(zscore(&a), Err(Error::Numeric(_))));
    }

    #[test]
    fn full_length_crop_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Array::<f32>::randn(&[10, 2], 1.0, &mut rng);
        let (c, onset) = random_crop(&a, 10, &mut rng).unwrap();
        assert_eq!(onset, 0);
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn crop_is_deterministic_under_a_seed() {
        let a = Array::from_vec(&[8, 1], (0..8).map(|v| v as f32).collect()).unwrap();
        let (c1, o1) = random_crop(&a, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let (c2, o2) = random_crop(&a, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(c1.data(), c2.data());
        assert_eq!(c1.data()[0], o1 as f32); // contiguous rows from onset
    }

    #[test]
    fn crop_onsets_are_uniform() {
        // Chi-square over the 10 possible onsets at 5%: crit(9 df) = 16.92.
        let a = Array::from_vec(&[12, 1], vec![0f32; 12]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut counts = [0f64; 10];
        let draws = 5000;
        for _ in 0..draws {
            let (_, o) = random_crop(&a, 3, &mut rng).unwrap();
            counts[o] += 1.0;
        }
        let expect = draws as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|c| (c - expect).powi(2) / expect).sum();
        assert!(chi2 < 16.92, "chi-square {}", chi2);
    }

    #[test]
    fn oversized_crop_is_contract_error() {
        let a = Array::from_vec(&[4, 1], vec![0f32; 4]).unwrap();
        assert!(matches!(
            random_crop(&a, 5, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn event_shift_applies_crop_offset() {
        let events = [(5, 4), (20, 3), (40, 2)];
        // Crop [18, 30): first event gone, second shifted to 2, third gone.
        assert_eq!(shift_events(&events, 18, 12), vec![(2, 3)]);
        // Crop overlapping an event partially clips it.
        assert_eq!(shift_events(&events, 7, 5), vec![(0, 2)]);
        // Identity crop keeps everything.
        assert_eq!(shift_events(&events, 0, 60), events.to_vec());
    }

    #[test]
    fn synth_spec_validates() {
        assert!(SynthSpec::default().validate().is_ok());
        let mut bad = SynthSpec::default();
        bad.onsets = vec![58];
        assert!(bad.validate().is_err()); // event exceeds series
        let mut bad = SynthSpec::default();
        bad.n = 15;
        assert!(bad.validate().is_err()); // orthogonality needs n % 2 == 0
        let mut bad = SynthSpec::default();
        bad.num_classes = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn class_loadings_are_orthogonal() {
        let spec = SynthSpec {
            num_classes: 4,
            ..SynthSpec::default()
        };
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..spec.n)
                    .map(|c| spec.loading(a, c) * spec.loading(b, c))
                    .sum();
                if a == b {
                    assert_eq!(dot, spec.n as f64);
                } else {
                    assert_eq!(dot, 0.0, "classes {} and {}", a, b);
                }
            }
        }
    }

    #[test]
    fn noiseless_sample_is_the_standardized_pattern() {
        let spec = SynthSpec {
            noise: 0.0,
            smooth_width: 1,
            ..SynthSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = synth_sample(&spec, 1, &mut rng).unwrap();
        // Closed form: z-scored event indicator times the sign pattern.
        let mask = spec.event_mask();
        let p = mask.iter().filter(|&&m| m).count() as f64 / spec.t as f64;
        let sd = (p * (1.0 - p)).sqrt();
        let z_on = (1.0 - p) / sd;
        let z_off = -p / sd;
        for r in 0..spec.t {
            for c in 0..spec.n {
                let want = spec.loading(1, c) * if mask[r] { z_on } else { z_off };
                let got = s.values.data()[r * spec.n + c] as f64;
                assert!(
                    (got - want).abs() < 1e-5,
                    "({}, {}): {} vs {}",
                    r,
                    c,
                    got,
                    want
                );
            }
        }
    }

    #[test]
    fn time_averaged_raw_channels_separate_classes_linearly() {
        let spec = SynthSpec {
            noise: 0.01,
            ..SynthSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let feats = |class: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let raw = synth_raw(&spec, class, rng).unwrap();
            let (t, n) = raw.dims();
            (0..n)
                .map(|c| (0..t).map(|r| raw.data()[r * n + c] as f64).sum::<f64>() / t as f64)
                .collect()
        };
        // Weight vector from the loading difference separates perfectly.
        let w: Vec<f64> = (0..spec.n)
            .map(|c| spec.loading(0, c) - spec.loading(1, c))
            .collect();
        let mut margins = [f64::INFINITY, f64::INFINITY];
        for _ in 0..40 {
            for class in 0..2 {
                let f = feats(class, &mut rng);
                let proj: f64 = f.iter().zip(&w).map(|(a, b)| a * b).sum();
                let signed = if class == 0 { proj } else { -proj };
                margins[class] = margins[class].min(signed);
            }
        }
        assert!(
            margins[0] > 0.0 && margins[1] > 0.0,
            "margins {:?}",
            margins
        );
    }

    #[test]
    fn class_balance_is_binomial() {
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = synth_generate(&spec, 1000, &mut rng).unwrap();
        let zeros = samples.iter().filter(|s| s.label == 0).count();
        // 99% binomial bounds around 500 at n=1000, p=0.5.
        assert!(
            (459..=541).contains(&zeros),
            "class-0 count {} outside binomial bounds",
            zeros
        );
    }

    #[test]
    fn dataset_tree_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        write_dataset(dir.path(), &spec, 6, 3, &mut rng).unwrap();
        let train = load_dir(&dir.path().join("train")).unwrap();
        let val = load_dir(&dir.path().join("val")).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(val.len(), 3);
        for s in train.iter().chain(&val) {
            assert_eq!(s.values.dims(), (60, 16));
            assert!(s.label < 2);
        }
        let events = load_events(&dir.path().join("events.csv")).unwrap();
        assert_eq!(events, vec![(15, 4), (38, 4)]);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = SynthSpec::default();
        let a = synth_generate(&spec, 3, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let b = synth_generate(&spec, 3, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.values.data(), y.values.data());
        }
    }
}

//! Labeled, split datasets of spectral frames and their on-disk format.
//!
//! A dataset directory holds two files:
//!
//! * `manifest`: UTF-8 `key=value` lines (spectral config, split seed,
//!   per-split per-class counts) followed by one tab-separated `source` record
//!   per input recording;
//! * `frames.bin`: a fixed header followed by one fixed-size record per sample.
//!
//! ```text
//! header   magic "CHDS" | version u32 | n_lines u32 | n_samples u64 | counts 4x3 u64
//! record   label u8 | split u8 | ambiguous u8 | reserved u8 | frame_index u32 |
//!          t_start_s f64 | source u32 | n_lines x f32
//! ```
//!
//! All integers and reals are little-endian.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::signal_io::{LabelTrack, MachiningClass, TimeSignal};
use crate::spectral::{
    frame_signal, SpectralConfig, SpectralError, SpectralFrame, SpectrumAnalyzer, WindowFunction,
};

pub const DATASET_MAGIC: &[u8; 4] = b"CHDS";
pub const DATASET_VERSION: u32 = 1;

/// Bytes before the first record in `frames.bin`.
pub const HEADER_BYTES: usize = 4 + 4 + 4 + 8 + 8 * Split::ALL.len() * 3;

/// Bytes of a record excluding the line values.
pub const RECORD_OVERHEAD_BYTES: usize = 1 + 1 + 1 + 1 + 4 + 8 + 4;

/// Validation share of the non-test frames of each class, as a ratio.
pub const VAL_NUMERATOR: usize = 3;
pub const VAL_DENOMINATOR: usize = 10;

const MANIFEST_FILE: &str = "manifest";
const FRAMES_FILE: &str = "frames.bin";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("EmptyDataset: {0}")]
    EmptyDataset(String),
    #[error("MissingClass: no {0} samples in the training split")]
    MissingClass(MachiningClass),
    #[error("InvalidArgument: {0}")]
    InvalidArgument(String),
    #[error("CorruptDataset: {0}")]
    CorruptDataset(String),
    #[error("IoFailure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
    Test2Ambiguous = 3,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Test2Ambiguous];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Test2Ambiguous => "test2",
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "test2" | "test2ambiguous" | "ambiguous" => Ok(Split::Test2Ambiguous),
            _ => Err(format!(
                "unknown split {s:?} (expected train, val, test or test2)"
            )),
        }
    }
}

/// One labeled frame. Line values are exactly representable as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame: SpectralFrame,
    pub label: MachiningClass,
    pub source_id: String,
    pub ambiguous: bool,
}

impl Sample {
    pub fn lines_f32(&self) -> Vec<f32> {
        self.frame.lines.iter().map(|&v| v as f32).collect()
    }
}

/// A recording handed to [`build_dataset`].
#[derive(Debug, Clone)]
pub struct SourceInput {
    pub id: String,
    pub signal: TimeSignal,
    pub labels: LabelTrack,
    pub ambiguous: bool,
    /// Free-form provenance: a file path or a generator parameter record.
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceRecord {
    pub id: String,
    pub ambiguous: bool,
    pub frames_kept: usize,
    pub frames_dropped: usize,
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub config: SpectralConfig,
    pub split_seed: u64,
    pub test_fraction: f64,
    pub sources: Vec<SourceRecord>,
}

impl Manifest {
    pub fn dropped_frames(&self) -> usize {
        self.sources.iter().map(|s| s.frames_dropped).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
    pub manifest: Manifest,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_lines(&self) -> usize {
        self.manifest.config.n_lines
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_samples(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(move |(_, &s)| s == split)
            .map(|(sample, _)| sample)
    }

    fn counts(&self) -> [[u64; 3]; 4] {
        let mut counts = [[0u64; 3]; 4];
        for (sample, split) in self.samples.iter().zip(&self.splits) {
            counts[*split as usize][sample.label.index()] += 1;
        }
        counts
    }

    /// Fails with `MissingClass` unless every class has training samples.
    pub fn require_all_classes(&self) -> Result<(), DatasetError> {
        let train = class_distribution(self, Split::Train);
        match MachiningClass::ALL.into_iter().find(|c| train[c] == 0) {
            Some(class) => Err(DatasetError::MissingClass(class)),
            None => Ok(()),
        }
    }

    /// Checks the split and frame invariants.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let corrupt = |m: String| Err(DatasetError::CorruptDataset(m));
        if self.samples.len() != self.splits.len() {
            return corrupt("sample and split counts differ".into());
        }
        let crop = self.manifest.config.crop_db;
        // Stored lines went through f32.
        let floor = f64::from((-crop) as f32);
        let n_lines = self.manifest.config.n_lines;
        for (i, (sample, split)) in self.samples.iter().zip(&self.splits).enumerate() {
            if sample.ambiguous != (*split == Split::Test2Ambiguous) {
                return corrupt(format!(
                    "sample {i}: ambiguous flag does not match split {split}"
                ));
            }
            let lines = &sample.frame.lines;
            if lines.len() != n_lines {
                return corrupt(format!(
                    "sample {i}: {} lines, expected {n_lines}",
                    lines.len()
                ));
            }
            if lines.iter().any(|v| !(floor..=0.0).contains(v)) {
                return corrupt(format!("sample {i}: line value outside [-{crop}, 0]"));
            }
            let max = lines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let all_floor = lines.iter().all(|&v| v == floor);
            if max != 0.0 && !all_floor {
                return corrupt(format!("sample {i}: frame maximum {max} is not 0 dB"));
            }
        }
        for class in MachiningClass::ALL {
            let counts = self.counts();
            let train = counts[Split::Train as usize][class.index()] as usize;
            let val = counts[Split::Val as usize][class.index()] as usize;
            let expected_val = (train + val) * VAL_NUMERATOR / VAL_DENOMINATOR;
            if val.abs_diff(expected_val) > 1 {
                return corrupt(format!(
                    "{class}: {train} train / {val} val is not a 70/30 split"
                ));
            }
        }
        Ok(())
    }
}

/// Per-class counts of one split.
pub fn class_distribution(ds: &LabeledDataset, split: Split) -> BTreeMap<MachiningClass, usize> {
    let mut out: BTreeMap<MachiningClass, usize> =
        MachiningClass::ALL.iter().map(|&c| (c, 0)).collect();
    for sample in ds.split_samples(split) {
        *out.entry(sample.label).or_default() += 1;
    }
    out
}

/// Split sizes for `n` unambiguous frames of one class: `(train, val, test)`.
/// Test takes `floor(test_fraction · n)`, validation `floor(0.3 · rest)`,
/// and training the remainder.
pub fn stratified_counts(n: usize, test_fraction: f64) -> (usize, usize, usize) {
    let n_test = ((test_fraction * n as f64) + 1e-9).floor() as usize;
    let n_test = n_test.min(n);
    let rest = n - n_test;
    let n_val = rest * VAL_NUMERATOR / VAL_DENOMINATOR;
    (rest - n_val, n_val, n_test)
}

/// Frames every source, labels frames lying inside a single labeled
/// interval, drops the rest, and assigns splits.
pub fn build_dataset(
    sources: &[SourceInput],
    config: &SpectralConfig,
    split_seed: u64,
    test_fraction: f64,
) -> Result<LabeledDataset, DatasetError> {
    if sources.is_empty() {
        return Err(DatasetError::EmptyDataset("no input recordings".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(DatasetError::InvalidArgument(format!(
            "test_fraction {test_fraction} outside [0, 1)"
        )));
    }
    config.validate()?;

    let mut samples = Vec::new();
    let mut records = Vec::with_capacity(sources.len());
    let mut analyzers: BTreeMap<(u64, usize), SpectrumAnalyzer> = BTreeMap::new();
    for source in sources {
        let fs = source.signal.sample_rate_hz();
        let window_n = config.window_samples(fs);
        let hop_n = config.hop_samples(fs);
        let windows = frame_signal(&source.signal, config)?;
        let analyzer = match analyzers.entry((fs.to_bits(), window_n)) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(SpectrumAnalyzer::new(config, fs, window_n)?)
            }
        };
        let mut kept = 0;
        let mut dropped = 0;
        for (k, window) in windows {
            let t_start = (k * hop_n) as f64 / fs;
            let t_end = (k * hop_n + window_n) as f64 / fs;
            let Some(label) = source.labels.label_for(t_start, t_end) else {
                dropped += 1;
                continue;
            };
            let mut frame = analyzer.frame(window, k, t_start)?;
            for v in &mut frame.lines {
                *v = f64::from(*v as f32);
            }
            samples.push(Sample {
                frame,
                label,
                source_id: source.id.clone(),
                ambiguous: source.ambiguous,
            });
            kept += 1;
        }
        if dropped > 0 {
            log::info!(
                "{}: dropped {dropped} unlabeled or straddling frames",
                source.id
            );
        }
        records.push(SourceRecord {
            id: source.id.clone(),
            ambiguous: source.ambiguous,
            frames_kept: kept,
            frames_dropped: dropped,
            origin: source.origin.clone(),
        });
    }
    if samples.is_empty() {
        return Err(DatasetError::EmptyDataset(
            "no frame lies inside a labeled interval".into(),
        ));
    }

    let splits = assign_splits(&samples, split_seed, test_fraction);
    let ds = LabeledDataset {
        samples,
        splits,
        manifest: Manifest {
            config: config.clone(),
            split_seed,
            test_fraction,
            sources: records,
        },
    };
    ds.validate()?;
    Ok(ds)
}

fn assign_splits(samples: &[Sample], split_seed: u64, test_fraction: f64) -> Vec<Split> {
    let mut splits = vec![Split::Test2Ambiguous; samples.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    for class in MachiningClass::ALL {
        let mut idx: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.ambiguous && s.label == class)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let (n_train, n_val, _) = stratified_counts(idx.len(), test_fraction);
        for (rank, &i) in idx.iter().enumerate() {
            splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    splits
}

fn window_fn_name(w: WindowFunction) -> &'static str {
    match w {
        WindowFunction::Hann => "hann",
        WindowFunction::Rectangular => "rectangular",
    }
}

fn render_manifest(ds: &LabeledDataset) -> String {
    let m = &ds.manifest;
    let c = &m.config;
    let mut out = String::from("# spectral frame dataset\n");
    let _ = writeln!(out, "version={DATASET_VERSION}");
    let _ = writeln!(out, "hop_s={}", c.hop_s);
    let _ = writeln!(out, "window_s={}", c.window_s);
    let _ = writeln!(out, "n_lines={}", c.n_lines);
    let _ = writeln!(out, "f_min_hz={}", c.f_min_hz);
    let _ = writeln!(out, "f_max_hz={}", c.f_max_hz);
    let _ = writeln!(out, "crop_db={}", c.crop_db);
    let _ = writeln!(out, "window_fn={}", window_fn_name(c.window_fn));
    let _ = writeln!(out, "split_seed={}", m.split_seed);
    let _ = writeln!(out, "test_fraction={}", m.test_fraction);
    let _ = writeln!(out, "samples={}", ds.samples.len());
    let _ = writeln!(out, "dropped_frames={}", m.dropped_frames());
    let counts = ds.counts();
    for split in Split::ALL {
        for class in MachiningClass::ALL {
            let _ = writeln!(
                out,
                "count.{split}.{class}={}",
                counts[split as usize][class.index()]
            );
        }
    }
    for s in &m.sources {
        let _ = writeln!(
            out,
            "source\t{}\t{}\t{}\t{}\t{}",
            s.id,
            u8::from(s.ambiguous),
            s.frames_kept,
            s.frames_dropped,
            s.origin
        );
    }
    out
}

/// Writes `manifest` and `frames.bin` into `dir`, creating it if needed.
pub fn save_dataset(ds: &LabeledDataset, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let n_lines = ds.n_lines();
    let source_index: BTreeMap<&str, u32> = ds
        .manifest
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i as u32))
        .collect();

    let mut buf =
        Vec::with_capacity(HEADER_BYTES + ds.len() * (RECORD_OVERHEAD_BYTES + 4 * n_lines));
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n_lines as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for row in ds.counts() {
        for c in row {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    for (sample, split) in ds.samples.iter().zip(&ds.splits) {
        let source = *source_index.get(sample.source_id.as_str()).ok_or_else(|| {
            DatasetError::InvalidArgument(format!(
                "sample source {} not in manifest",
                sample.source_id
            ))
        })?;
        buf.push(sample.label as u8);
        buf.push(*split as u8);
        buf.push(u8::from(sample.ambiguous));
        buf.push(0);
        buf.extend_from_slice(&(sample.frame.frame_index as u32).to_le_bytes());
        buf.extend_from_slice(&sample.frame.t_start_s.to_le_bytes());
        buf.extend_from_slice(&source.to_le_bytes());
        for &v in &sample.frame.lines {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(dir.join(MANIFEST_FILE), render_manifest(ds))?;
    fs::write(dir.join(FRAMES_FILE), buf)?;
    Ok(())
}

fn parse_manifest(text: &str) -> Result<(Manifest, BTreeMap<String, String>), DatasetError> {
    let corrupt = |m: String| DatasetError::CorruptDataset(format!("manifest: {m}"));
    let mut keys = BTreeMap::new();
    let mut sources = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("source\t") {
            let f: Vec<&str> = rest.splitn(5, '\t').collect();
            if f.len() != 5 {
                return Err(corrupt(format!("bad source record {line:?}")));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| corrupt(format!("bad count {s:?}")))
            };
            sources.push(SourceRecord {
                id: f[0].to_string(),
                ambiguous: f[1] == "1",
                frames_kept: num(f[2])?,
                frames_dropped: num(f[3])?,
                origin: f[4].to_string(),
            });
        } else if let Some((k, v)) = line.split_once('=') {
            keys.insert(k.trim().to_string(), v.trim().to_string());
        } else {
            return Err(corrupt(format!("unrecognized line {line:?}")));
        }
    }
    fn get<T: FromStr>(keys: &BTreeMap<String, String>, k: &str) -> Result<T, DatasetError> {
        keys.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| DatasetError::CorruptDataset(format!("manifest: missing or bad {k}")))
    }
    let version: u32 = get(&keys, "version")?;
    if version != DATASET_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let window_fn = match keys.get("window_fn").map(String::as_str) {
        Some("hann") => WindowFunction::Hann,
        Some("rectangular") => WindowFunction::Rectangular,
        other => return Err(corrupt(format!("bad window_fn {other:?}"))),
    };
    let config = SpectralConfig {
        hop_s: get(&keys, "hop_s")?,
        window_s: get(&keys, "window_s")?,
        n_lines: get(&keys, "n_lines")?,
        f_min_hz: get(&keys, "f_min_hz")?,
        f_max_hz: get(&keys, "f_max_hz")?,
        crop_db: get(&keys, "crop_db")?,
        window_fn,
    };
    config
        .validate()
        .map_err(|e| corrupt(format!("invalid spectral config: {e}")))?;
    let manifest = Manifest {
        config,
        split_seed: get(&keys, "split_seed")?,
        test_fraction: get(&keys, "test_fraction")?,
        sources,
    };
    Ok((manifest, keys))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(DatasetError::CorruptDataset(format!(
                "frames.bin truncated at byte {} of {}",
                self.bytes.len(),
                end
            )));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DatasetError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, DatasetError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

/// Reads a directory written by [`save_dataset`] and validates it.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset, DatasetError> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let (manifest, keys) = parse_manifest(&text)?;
    let bytes = fs::read(dir.join(FRAMES_FILE))?;
    let corrupt = |m: String| DatasetError::CorruptDataset(m);

    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if &r.array::<4>()? != DATASET_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let n_lines = r.u32()? as usize;
    if n_lines != manifest.config.n_lines {
        return Err(corrupt(format!(
            "frames.bin has {n_lines} lines, manifest says {}",
            manifest.config.n_lines
        )));
    }
    let n_samples = r.u64()? as usize;
    let expected_len = HEADER_BYTES + n_samples * (RECORD_OVERHEAD_BYTES + 4 * n_lines);
    if bytes.len() != expected_len {
        return Err(corrupt(format!(
            "frames.bin is {} bytes, expected {expected_len}",
            bytes.len()
        )));
    }
    let mut header_counts = [[0u64; 3]; 4];
    for row in header_counts.iter_mut() {
        for c in row.iter_mut() {
            *c = r.u64()?;
        }
    }

    let mut samples = Vec::with_capacity(n_samples);
    let mut splits = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = MachiningClass::from_index(r.u8()? as usize)
            .ok_or_else(|| corrupt(format!("record {i}: bad label")))?;
        let split =
            Split::from_code(r.u8()?).ok_or_else(|| corrupt(format!("record {i}: bad split")))?;
        let ambiguous = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(corrupt(format!("record {i}: bad ambiguous flag"))),
        };
        r.u8()?;
        let frame_index = r.u32()? as usize;
        let t_start_s = r.f64()?;
        let source = r.u32()? as usize;
        let source_id = manifest
            .sources
            .get(source)
            .ok_or_else(|| corrupt(format!("record {i}: source {source} not in manifest")))?
            .id
            .clone();
        let mut lines = Vec::with_capacity(n_lines);
        for _ in 0..n_lines {
            lines.push(f64::from(r.f32()?));
        }
        samples.push(Sample {
            frame: SpectralFrame {
                lines,
                frame_index,
                t_start_s,
            },
            label,
            source_id,
            ambiguous,
        });
        splits.push(split);
    }

    let ds = LabeledDataset {
        samples,
        splits,
        manifest,
    };
    let counts = ds.counts();
    if counts != header_counts {
        return Err(corrupt(
            "per-split counts disagree with frames.bin header".into(),
        ));
    }
    for split in Split::ALL {
        for class in MachiningClass::ALL {
            let key = format!("count.{split}.{class}");
            let stated: Option<u64> = keys.get(&key).and_then(|v| v.parse().ok());
            if stated != Some(counts[split as usize][class.index()]) {
                return Err(corrupt(format!("manifest {key} disagrees with frames.bin")));
            }
        }
    }
    if keys.get("samples").and_then(|v| v.parse::<usize>().ok()) != Some(n_samples) {
        return Err(corrupt(
            "manifest sample count disagrees with frames.bin".into(),
        ));
    }
    ds.validate()?;
    Ok(ds)
}

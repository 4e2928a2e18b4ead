//! Time-domain recordings and expert label tracks.
//!
//! Recordings are read from RIFF/WAVE files (16-bit PCM or 32-bit float,
//! first channel only) and written back as 16-bit PCM mono. Label tracks
//! are plain CSV files with one `start_s,end_s,label` record per line.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

/// Lowest sample rate that still covers the 0-2500 Hz analysis band.
pub const MIN_SAMPLE_RATE_HZ: f64 = 5000.0;

/// Slack allowed when comparing frame edges against label boundaries.
pub const TIME_TOLERANCE_S: f64 = 1e-9;

/// Full-scale divisor for 16-bit PCM.
const PCM16_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum SignalIoError {
    #[error("MalformedContainer: {0}")]
    MalformedContainer(String),
    #[error("UnsupportedEncoding: {0}")]
    UnsupportedEncoding(String),
    #[error("SampleRateTooLow: {0} Hz (minimum {MIN_SAMPLE_RATE_HZ} Hz)")]
    SampleRateTooLow(f64),
    #[error("EmptySignal: recording contains no samples")]
    EmptySignal,
    #[error("AmplitudeOutOfRange: sample {index} = {value}")]
    AmplitudeOutOfRange { index: usize, value: f64 },
    #[error("IoFailure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("ParseError: line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("UnknownLabel: line {line}: {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("OverlappingIntervals: [{0}, {1}) overlaps [{2}, {3})")]
    OverlappingIntervals(f64, f64, f64, f64),
    #[error("EmptyTrack: label file has no intervals")]
    EmptyTrack,
}

/// The three machining states. The integer encoding is stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MachiningClass {
    Chatter = 0,
    MachiningNoChatter = 1,
    RotationNoMachining = 2,
}

impl MachiningClass {
    pub const ALL: [MachiningClass; 3] = [
        MachiningClass::Chatter,
        MachiningClass::MachiningNoChatter,
        MachiningClass::RotationNoMachining,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Short name used in label files and reports.
    pub fn name(self) -> &'static str {
        match self {
            MachiningClass::Chatter => "chatter",
            MachiningClass::MachiningNoChatter => "machining",
            MachiningClass::RotationNoMachining => "rotation",
        }
    }
}

impl fmt::Display for MachiningClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MachiningClass {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chatter" => Ok(MachiningClass::Chatter),
            "machining" => Ok(MachiningClass::MachiningNoChatter),
            "rotation" => Ok(MachiningClass::RotationNoMachining),
            _ => Err(()),
        }
    }
}

/// A sampled vibration waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    samples: Vec<f64>,
    sample_rate_hz: f64,
}

impl TimeSignal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self, SignalIoError> {
        if !(sample_rate_hz >= MIN_SAMPLE_RATE_HZ) {
            return Err(SignalIoError::SampleRateTooLow(sample_rate_hz));
        }
        if samples.is_empty() {
            return Err(SignalIoError::EmptySignal);
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    /// Returns a copy with every sample multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> TimeSignal {
        TimeSignal {
            samples: self.samples.iter().map(|s| s * factor).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// One labeled span of a recording, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelInterval {
    pub start_s: f64,
    pub end_s: f64,
    pub label: MachiningClass,
}

impl LabelInterval {
    /// Whether `[start_s, end_s)` lies inside this interval, up to
    /// [`TIME_TOLERANCE_S`] of rounding at the edges.
    pub fn contains(&self, start_s: f64, end_s: f64) -> bool {
        start_s >= self.start_s - TIME_TOLERANCE_S && end_s <= self.end_s + TIME_TOLERANCE_S
    }
}

/// Sorted, non-overlapping label intervals. Gaps are unlabeled time.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTrack {
    intervals: Vec<LabelInterval>,
}

impl LabelTrack {
    /// Sorts the intervals and rejects empty tracks, inverted intervals and overlaps.
    pub fn new(mut intervals: Vec<LabelInterval>) -> Result<Self, SignalIoError> {
        if intervals.is_empty() {
            return Err(SignalIoError::EmptyTrack);
        }
        for iv in &intervals {
            if !(iv.start_s < iv.end_s) || !iv.start_s.is_finite() || !iv.end_s.is_finite() {
                return Err(SignalIoError::ParseError {
                    line: 0,
                    message: format!("interval [{}, {}) is not increasing", iv.start_s, iv.end_s),
                });
            }
        }
        intervals.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        for pair in intervals.windows(2) {
            if pair[1].start_s < pair[0].end_s {
                return Err(SignalIoError::OverlappingIntervals(
                    pair[0].start_s,
                    pair[0].end_s,
                    pair[1].start_s,
                    pair[1].end_s,
                ));
            }
        }
        Ok(Self { intervals })
    }

    /// A track with a single interval.
    pub fn single(start_s: f64, end_s: f64, label: MachiningClass) -> Result<Self, SignalIoError> {
        Self::new(vec![LabelInterval {
            start_s,
            end_s,
            label,
        }])
    }

    pub fn intervals(&self) -> &[LabelInterval] {
        &self.intervals
    }

    /// Label of the interval fully containing `[start_s, end_s)`, if any.
    pub fn label_for(&self, start_s: f64, end_s: f64) -> Option<MachiningClass> {
        self.intervals
            .iter()
            .find(|iv| iv.contains(start_s, end_s))
            .map(|iv| iv.label)
    }
}

/// Reads a WAV file. Multi-channel input keeps channel 0 only.
pub fn load_wav(path: impl AsRef<Path>) -> Result<TimeSignal, SignalIoError> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(map_hound_error)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    if channels > 1 {
        log::warn!(
            "{}: {} channels, using channel 0 only",
            path.display(),
            channels
        );
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / PCM16_SCALE))
            .collect::<Result<_, _>>()
            .map_err(map_hound_error)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(map_hound_error)?,
        (format, bits) => {
            return Err(SignalIoError::UnsupportedEncoding(format!(
                "{format:?} {bits}-bit"
            )))
        }
    };

    let rate = f64::from(spec.sample_rate);
    if rate < MIN_SAMPLE_RATE_HZ {
        return Err(SignalIoError::SampleRateTooLow(rate));
    }
    let samples = interleaved.into_iter().step_by(channels).collect();
    TimeSignal::new(samples, rate)
}

/// Writes a 16-bit PCM mono WAV file.
pub fn save_wav(signal: &TimeSignal, path: impl AsRef<Path>) -> Result<(), SignalIoError> {
    if let Some((index, &value)) = signal
        .samples
        .iter()
        .enumerate()
        .find(|(_, s)| !(s.abs() <= 1.0))
    {
        return Err(SignalIoError::AmplitudeOutOfRange { index, value });
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate_hz.round() as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_hound_error)?;
    for &s in &signal.samples {
        let q = (s * PCM16_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(map_hound_error)?;
    }
    writer.finalize().map_err(map_hound_error)?;
    Ok(())
}

fn map_hound_error(err: hound::Error) -> SignalIoError {
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            SignalIoError::MalformedContainer(format!("truncated file: {e}"))
        }
        hound::Error::IoError(e) => SignalIoError::IoFailure(e),
        hound::Error::FormatError(msg) => SignalIoError::MalformedContainer(msg.to_string()),
        hound::Error::Unsupported => {
            SignalIoError::UnsupportedEncoding("unsupported WAV format".into())
        }
        other => SignalIoError::MalformedContainer(other.to_string()),
    }
}

/// Parses label CSV text (`start_s,end_s,label`, `#` comments).
pub fn parse_labels(text: &str) -> Result<LabelTrack, SignalIoError> {
    let mut intervals = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(SignalIoError::ParseError {
                line: line_no,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let number = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| SignalIoError::ParseError {
                    line: line_no,
                    message: format!("bad number {s:?}"),
                })
        };
        let start_s = number(fields[0])?;
        let end_s = number(fields[1])?;
        if !(start_s < end_s) {
            return Err(SignalIoError::ParseError {
                line: line_no,
                message: format!("start {start_s} is not before end {end_s}"),
            });
        }
        let label =
            fields[2]
                .parse::<MachiningClass>()
                .map_err(|_| SignalIoError::UnknownLabel {
                    line: line_no,
                    label: fields[2].to_string(),
                })?;
        intervals.push(LabelInterval {
            start_s,
            end_s,
            label,
        });
    }
    LabelTrack::new(intervals)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelTrack, SignalIoError> {
    let text = fs::read_to_string(path)?;
    parse_labels(&text)
}

/// Renders a track in the label CSV format accepted by [`parse_labels`].
pub fn format_labels(track: &LabelTrack) -> String {
    let mut out = String::from("# start_s,end_s,label\n");
    for iv in &track.intervals {
        out.push_str(&format!("{},{},{}\n", iv.start_s, iv.end_s, iv.label));
    }
    out
}

pub fn save_labels(track: &LabelTrack, path: impl AsRef<Path>) -> Result<(), SignalIoError> {
    fs::write(path, format_labels(track))?;
    Ok(())
}

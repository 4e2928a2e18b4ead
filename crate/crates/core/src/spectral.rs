//! Per-frame renormalized spectra.
//!
//! A signal is cut into fixed frames, each frame is windowed, zero-padded and
//! transformed, the magnitude spectrum is resampled onto a uniform grid of
//! `n_lines` frequencies, and the result is expressed in dB relative to the
//! frame's own maximum, floored at `-crop_db`. Dividing by the frame maximum
//! removes any dependence on the absolute signal amplitude.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::signal_io::TimeSignal;

/// Smallest frame length accepted by [`frame_signal`].
pub const MIN_WINDOW_SAMPLES: usize = 16;

/// Height in pixels of exported PGM frames.
pub const PGM_HEIGHT: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("WindowTooShort: {0} samples (minimum {MIN_WINDOW_SAMPLES})")]
    WindowTooShort(usize),
    #[error("BandExceedsNyquist: f_max {f_max_hz} Hz > {nyquist_hz} Hz")]
    BandExceedsNyquist { f_max_hz: f64, nyquist_hz: f64 },
    #[error("EmptyWindow")]
    EmptyWindow,
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowFunction {
    #[default]
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConfig {
    pub hop_s: f64,
    pub window_s: f64,
    pub n_lines: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub crop_db: f64,
    pub window_fn: WindowFunction,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            hop_s: 0.1,
            window_s: 0.1,
            n_lines: 1024,
            f_min_hz: 0.0,
            f_max_hz: 2500.0,
            crop_db: 20.0,
            window_fn: WindowFunction::Hann,
        }
    }
}

impl SpectralConfig {
    /// Checks the sample-rate independent invariants.
    pub fn validate(&self) -> Result<(), SpectralError> {
        let bad = |m: &str| Err(SpectralError::InvalidConfig(m.to_string()));
        if !(self.hop_s > 0.0) {
            return bad("hop_s must be positive");
        }
        if !(self.window_s > 0.0) {
            return bad("window_s must be positive");
        }
        if self.n_lines < 2 {
            return bad("n_lines must be at least 2");
        }
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < self.f_max_hz) {
            return bad("need 0 <= f_min_hz < f_max_hz");
        }
        if !(self.crop_db > 0.0) {
            return bad("crop_db must be positive");
        }
        Ok(())
    }

    pub fn window_samples(&self, sample_rate_hz: f64) -> usize {
        (self.window_s * sample_rate_hz).round() as usize
    }

    pub fn hop_samples(&self, sample_rate_hz: f64) -> usize {
        ((self.hop_s * sample_rate_hz).round() as usize).max(1)
    }

    /// Spacing of the output frequency grid.
    pub fn line_spacing_hz(&self) -> f64 {
        (self.f_max_hz - self.f_min_hz) / (self.n_lines - 1) as f64
    }

    /// Frequency of grid line `j`.
    pub fn line_frequency(&self, j: usize) -> f64 {
        if j == self.n_lines - 1 {
            self.f_max_hz
        } else {
            self.f_min_hz + j as f64 * self.line_spacing_hz()
        }
    }

    /// Smallest power-of-two FFT size that holds `window_len` samples and
    /// resolves at least one raw bin per grid line.
    pub fn fft_size(&self, sample_rate_hz: f64, window_len: usize) -> usize {
        let min_for_resolution = (sample_rate_hz / self.line_spacing_hz()).ceil() as usize;
        min_for_resolution
            .max(window_len)
            .max(1)
            .next_power_of_two()
    }
}

/// One frame's renormalized spectrum, in dB relative to the frame maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrame {
    pub lines: Vec<f64>,
    pub frame_index: usize,
    pub t_start_s: f64,
}

/// Splits a signal into frames. Frames that would run past the end are dropped.
pub fn frame_signal<'a>(
    signal: &'a TimeSignal,
    config: &SpectralConfig,
) -> Result<Vec<(usize, &'a [f64])>, SpectralError> {
    config.validate()?;
    let fs = signal.sample_rate_hz();
    let window_n = config.window_samples(fs);
    if window_n < MIN_WINDOW_SAMPLES {
        return Err(SpectralError::WindowTooShort(window_n));
    }
    let hop_n = config.hop_samples(fs);
    let samples = signal.samples();
    if samples.len() < window_n {
        return Ok(Vec::new());
    }
    let count = (samples.len() - window_n) / hop_n + 1;
    Ok((0..count)
        .map(|k| (k, &samples[k * hop_n..k * hop_n + window_n]))
        .collect())
}

/// Zero-pads `samples` to `n_fft` points and returns the full complex FFT.
pub fn padded_spectrum(samples: &[f64], n_fft: usize) -> Vec<Complex64> {
    assert!(samples.len() <= n_fft, "window longer than FFT size");
    let mut buf: Vec<Complex64> = samples.iter().map(|&s| Complex64::new(s, 0.0)).collect();
    buf.resize(n_fft, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    buf
}

/// Reusable extractor for a fixed configuration, sample rate and window
/// length. Holds the FFT plan and window coefficients.
pub struct SpectrumAnalyzer {
    config: SpectralConfig,
    sample_rate_hz: f64,
    n_fft: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl SpectrumAnalyzer {
    pub fn new(
        config: &SpectralConfig,
        sample_rate_hz: f64,
        window_len: usize,
    ) -> Result<Self, SpectralError> {
        config.validate()?;
        if window_len == 0 {
            return Err(SpectralError::EmptyWindow);
        }
        let nyquist_hz = sample_rate_hz / 2.0;
        if config.f_max_hz > nyquist_hz {
            return Err(SpectralError::BandExceedsNyquist {
                f_max_hz: config.f_max_hz,
                nyquist_hz,
            });
        }
        let n_fft = config.fft_size(sample_rate_hz, window_len);
        let window = match config.window_fn {
            WindowFunction::Hann if window_len > 1 => (0..window_len)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (window_len - 1) as f64).cos())
                .collect(),
            _ => vec![1.0; window_len],
        };
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            config: config.clone(),
            sample_rate_hz,
            n_fft,
            window,
            fft,
        })
    }

    pub fn fft_size(&self) -> usize {
        self.n_fft
    }

    /// Windowed FFT magnitudes linearly interpolated onto the line grid.
    pub fn magnitudes(&self, samples: &[f64]) -> Result<Vec<f64>, SpectralError> {
        if samples.is_empty() {
            return Err(SpectralError::EmptyWindow);
        }
        if samples.len() != self.window.len() {
            return SpectrumAnalyzer::new(&self.config, self.sample_rate_hz, samples.len())?
                .magnitudes(samples);
        }
        let mut buf: Vec<Complex64> = samples
            .iter()
            .zip(&self.window)
            .map(|(s, w)| Complex64::new(s * w, 0.0))
            .collect();
        buf.resize(self.n_fft, Complex64::new(0.0, 0.0));
        self.fft.process(&mut buf);

        let half = self.n_fft / 2;
        let raw: Vec<f64> = buf[..=half].iter().map(|c| c.norm()).collect();
        let bin_hz = self.sample_rate_hz / self.n_fft as f64;
        Ok((0..self.config.n_lines)
            .map(|j| {
                let pos = self.config.line_frequency(j) / bin_hz;
                let k = (pos.floor() as usize).min(half);
                if k >= half {
                    return raw[half];
                }
                let frac = pos - k as f64;
                raw[k] * (1.0 - frac) + raw[k + 1] * frac
            })
            .collect())
    }

    /// Full pipeline for one frame.
    pub fn frame(
        &self,
        samples: &[f64],
        frame_index: usize,
        t_start_s: f64,
    ) -> Result<SpectralFrame, SpectralError> {
        let mags = self.magnitudes(samples)?;
        Ok(SpectralFrame {
            lines: renormalize(&mags, &self.config),
            frame_index,
            t_start_s,
        })
    }
}

/// Magnitude spectrum of one window on the configured line grid.
pub fn magnitude_spectrum(
    window: &[f64],
    sample_rate_hz: f64,
    config: &SpectralConfig,
) -> Result<Vec<f64>, SpectralError> {
    if window.is_empty() {
        return Err(SpectralError::EmptyWindow);
    }
    SpectrumAnalyzer::new(config, sample_rate_hz, window.len())?.magnitudes(window)
}

/// Converts magnitudes to dB relative to their maximum, floored at `-crop_db`.
/// An all-zero input maps to a uniform floor.
pub fn renormalize(magnitudes: &[f64], config: &SpectralConfig) -> Vec<f64> {
    let floor = -config.crop_db;
    let max = magnitudes.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![floor; magnitudes.len()];
    }
    magnitudes
        .iter()
        .map(|&m| {
            if m <= 0.0 {
                floor
            } else {
                (20.0 * (m / max).log10()).max(floor)
            }
        })
        .collect()
}

/// Frames, transforms and renormalizes a whole signal.
pub fn extract_frames(
    signal: &TimeSignal,
    config: &SpectralConfig,
) -> Result<Vec<SpectralFrame>, SpectralError> {
    let windows = frame_signal(signal, config)?;
    let fs = signal.sample_rate_hz();
    let analyzer = SpectrumAnalyzer::new(config, fs, config.window_samples(fs))?;
    let hop_n = config.hop_samples(fs);
    windows
        .into_iter()
        .map(|(k, w)| analyzer.frame(w, k, (k * hop_n) as f64 / fs))
        .collect()
}

/// Renders a frame as a binary PGM bar chart, one column per line.
pub fn frame_to_pgm(frame: &SpectralFrame, crop_db: f64) -> Vec<u8> {
    let width = frame.lines.len();
    let heights: Vec<usize> = frame
        .lines
        .iter()
        .map(|&v| {
            let h = (PGM_HEIGHT as f64 * (v + crop_db) / crop_db).round();
            h.clamp(0.0, PGM_HEIGHT as f64) as usize
        })
        .collect();
    let mut out = format!("P5\n{width} {PGM_HEIGHT}\n255\n").into_bytes();
    for row in 0..PGM_HEIGHT {
        let level_from_bottom = PGM_HEIGHT - row;
        out.extend(
            heights
                .iter()
                .map(|&h| if h >= level_from_bottom { 255u8 } else { 0u8 }),
        );
    }
    out
}

pub fn export_frame_pgm(
    frame: &SpectralFrame,
    crop_db: f64,
    path: impl AsRef<Path>,
) -> std::io::Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&frame_to_pgm(frame, crop_db))?;
    file.flush()
}

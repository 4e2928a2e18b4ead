//! Synthetic machining vibration with known spectral structure.
//!
//! Each class has a distinct peak layout:
//!
//! * rotation without machining: the first three spindle harmonics at a low level;
//! * machining without chatter: six tooth-passing harmonics with `1/h` amplitudes;
//! * chatter: the machining content plus a dominant tone near a structural mode,
//!   off the tooth-passing grid, with sidebands at `f_c ± f_tp`.
//!
//! Ambiguous signals are convex blends of a class with a neighbouring class;
//! the label follows the dominant component.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::signal_io::{LabelTrack, MachiningClass, TimeSignal};

/// Sample rate of every synthesized recording.
pub const SYNTH_SAMPLE_RATE_HZ: f64 = 22050.0;

/// Maximum random offset of the chatter tone from the structural mode.
pub const CHATTER_DETUNE_HZ: f64 = 3.0;

/// Minimum distance between the chatter tone and any tooth-passing harmonic.
pub const MIN_CHATTER_OFFSET_HZ: f64 = 5.0;

/// Level of each sideband relative to the chatter tone.
pub const SIDEBAND_RATIO: f64 = 0.3;

/// Amplitude of the spindle fundamental in air cutting.
pub const ROTATION_LEVEL: f64 = 0.05;

const ROTATION_HARMONICS: usize = 3;
const MACHINING_HARMONICS: usize = 6;
const BAND_MAX_HZ: f64 = 2500.0;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("InfeasibleSpec: {0}")]
    InfeasibleSpec(String),
    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),
}

/// Parameters of one synthetic recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub spindle_rpm: f64,
    pub n_teeth: u32,
    pub structural_mode_hz: f64,
    pub chatter_ratio: f64,
    pub noise_sigma: f64,
    pub amplitude_scale: f64,
    pub duration_s: f64,
    pub seed: u64,
    pub class: MachiningClass,
    pub ambiguity: f64,
}

impl SynthSpec {
    pub fn spindle_hz(&self) -> f64 {
        self.spindle_rpm / 60.0
    }

    pub fn tooth_passing_hz(&self) -> f64 {
        f64::from(self.n_teeth) * self.spindle_rpm / 60.0
    }

    pub fn is_ambiguous(&self) -> bool {
        self.ambiguity > 0.0
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |m: String| Err(SynthError::InvalidSpec(m));
        let f_tp = self.tooth_passing_hz();
        if !(self.spindle_rpm > 0.0) || self.n_teeth == 0 {
            return invalid("spindle_rpm and n_teeth must be positive".into());
        }
        if !(f_tp > 0.0 && f_tp < BAND_MAX_HZ) {
            return invalid(format!(
                "tooth-passing frequency {f_tp} Hz outside (0, {BAND_MAX_HZ})"
            ));
        }
        if !(self.structural_mode_hz > 0.0 && self.structural_mode_hz < BAND_MAX_HZ) {
            return invalid(format!(
                "structural mode {} Hz outside (0, {BAND_MAX_HZ})",
                self.structural_mode_hz
            ));
        }
        if !(self.chatter_ratio >= 0.0) || !(self.noise_sigma >= 0.0) {
            return invalid("chatter_ratio and noise_sigma must be non-negative".into());
        }
        if !(self.amplitude_scale > 0.0) || !self.amplitude_scale.is_finite() {
            return invalid("amplitude_scale must be positive".into());
        }
        if !(self.duration_s > 0.0) {
            return invalid("duration_s must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ambiguity) {
            return invalid(format!("ambiguity {} outside [0, 1)", self.ambiguity));
        }
        Ok(())
    }

    /// Space-separated `key=value` record, parsed back by [`FromStr`].
    pub fn to_record(&self) -> String {
        format!(
            "class={} spindle_rpm={} n_teeth={} structural_mode_hz={} chatter_ratio={} \
             noise_sigma={} amplitude_scale={} duration_s={} seed={} ambiguity={}",
            self.class,
            self.spindle_rpm,
            self.n_teeth,
            self.structural_mode_hz,
            self.chatter_ratio,
            self.noise_sigma,
            self.amplitude_scale,
            self.duration_s,
            self.seed,
            self.ambiguity
        )
    }
}

impl FromStr for SynthSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: BTreeMap<&str, &str> = s
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .collect();
        fn get<T: FromStr>(fields: &BTreeMap<&str, &str>, key: &str) -> Result<T, String> {
            fields
                .get(key)
                .ok_or_else(|| format!("missing {key}"))?
                .parse()
                .map_err(|_| format!("bad value for {key}"))
        }
        let class_name: String = get(&fields, "class")?;
        Ok(SynthSpec {
            class: class_name
                .parse()
                .map_err(|_| format!("unknown class {class_name}"))?,
            spindle_rpm: get(&fields, "spindle_rpm")?,
            n_teeth: get(&fields, "n_teeth")?,
            structural_mode_hz: get(&fields, "structural_mode_hz")?,
            chatter_ratio: get(&fields, "chatter_ratio")?,
            noise_sigma: get(&fields, "noise_sigma")?,
            amplitude_scale: get(&fields, "amplitude_scale")?,
            duration_s: get(&fields, "duration_s")?,
            seed: get(&fields, "seed")?,
            ambiguity: get(&fields, "ambiguity")?,
        })
    }
}

/// Distance from `frequency` to the nearest harmonic `k·f_tp`, `k ≥ 1`.
pub fn harmonic_grid_distance(frequency: f64, f_tp: f64) -> f64 {
    assert!(f_tp > 0.0, "f_tp must be positive");
    let k = (frequency / f_tp).round().max(1.0);
    let below = (frequency - (k - 1.0).max(1.0) * f_tp).abs();
    let at = (frequency - k * f_tp).abs();
    let above = (frequency - (k + 1.0) * f_tp).abs();
    at.min(below).min(above)
}

/// Picks the chatter frequency near the structural mode. The seeded offset is
/// used when it keeps clear of the harmonic grid; otherwise the closest
/// feasible offset on a 0.01 Hz lattice is taken.
fn chatter_frequency(spec: &SynthSpec, preferred_offset: f64) -> Result<f64, SynthError> {
    let f_tp = spec.tooth_passing_hz();
    let feasible = |f: f64| {
        f > MIN_CHATTER_OFFSET_HZ && harmonic_grid_distance(f, f_tp) > MIN_CHATTER_OFFSET_HZ
    };
    let preferred = spec.structural_mode_hz + preferred_offset;
    if feasible(preferred) {
        return Ok(preferred);
    }
    let steps = (2.0 * CHATTER_DETUNE_HZ / 0.01).round() as i64;
    let mut candidates: Vec<f64> = (0..=steps)
        .map(|i| -CHATTER_DETUNE_HZ + i as f64 * 0.01)
        .collect();
    candidates.sort_by(|a, b| {
        (a - preferred_offset)
            .abs()
            .total_cmp(&(b - preferred_offset).abs())
    });
    candidates
        .into_iter()
        .map(|d| spec.structural_mode_hz + d)
        .find(|&f| feasible(f))
        .ok_or_else(|| {
            SynthError::InfeasibleSpec(format!(
                "no chatter tone within ±{CHATTER_DETUNE_HZ} Hz of {} Hz clears the {} Hz harmonic grid",
                spec.structural_mode_hz, f_tp
            ))
        })
}

#[derive(Clone, Copy)]
struct Partial {
    freq: f64,
    amp: f64,
    phase: f64,
}

/// Synthesizes the recording described by `spec`. Deterministic in `spec`.
pub fn generate(spec: &SynthSpec) -> Result<TimeSignal, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut phase = || rng.random_range(0.0..2.0 * PI);

    let f_r = spec.spindle_hz();
    let f_tp = spec.tooth_passing_hz();
    let rotation: Vec<Partial> = (1..=ROTATION_HARMONICS)
        .map(|h| Partial {
            freq: h as f64 * f_r,
            amp: ROTATION_LEVEL / h as f64,
            phase: phase(),
        })
        .collect();
    let machining: Vec<Partial> = (1..=MACHINING_HARMONICS)
        .map(|h| Partial {
            freq: h as f64 * f_tp,
            amp: 1.0 / h as f64,
            phase: phase(),
        })
        .collect();
    let chatter_phases = [phase(), phase(), phase()];
    let detune = rng.random_range(-CHATTER_DETUNE_HZ..=CHATTER_DETUNE_HZ);

    let needs_chatter = match spec.class {
        MachiningClass::Chatter => true,
        MachiningClass::MachiningNoChatter => spec.ambiguity > 0.0,
        MachiningClass::RotationNoMachining => false,
    };
    let chatter_tone: Vec<Partial> = if needs_chatter {
        let f_c = chatter_frequency(spec, detune)?;
        let amp = spec.chatter_ratio * machining[0].amp;
        vec![
            Partial {
                freq: f_c,
                amp,
                phase: chatter_phases[0],
            },
            Partial {
                freq: f_c - f_tp,
                amp: SIDEBAND_RATIO * amp,
                phase: chatter_phases[1],
            },
            Partial {
                freq: f_c + f_tp,
                amp: SIDEBAND_RATIO * amp,
                phase: chatter_phases[2],
            },
        ]
    } else {
        Vec::new()
    };

    // (weight, partials) pairs making up the blended signal.
    let lambda = spec.ambiguity;
    let weighted = |parts: &[Partial], w: f64| -> Vec<Partial> {
        parts
            .iter()
            .map(|p| Partial {
                freq: p.freq,
                amp: p.amp * w,
                phase: p.phase,
            })
            .collect()
    };
    let partials: Vec<Partial> = match spec.class {
        // (1-λ)(M + C) + λM = M + (1-λ)C
        MachiningClass::Chatter => machining
            .iter()
            .copied()
            .chain(weighted(&chatter_tone, 1.0 - lambda))
            .collect(),
        // (1-λ)M + λ(M + C) = M + λC
        MachiningClass::MachiningNoChatter => machining
            .iter()
            .copied()
            .chain(weighted(&chatter_tone, lambda))
            .collect(),
        // (1-λ)R + λ·(machining at the air-cutting level)
        MachiningClass::RotationNoMachining => weighted(&rotation, 1.0 - lambda)
            .into_iter()
            .chain(weighted(&machining, lambda * ROTATION_LEVEL))
            .collect(),
    };

    let n = (spec.duration_s * SYNTH_SAMPLE_RATE_HZ).round() as usize;
    let noise =
        Normal::new(0.0, spec.noise_sigma).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / SYNTH_SAMPLE_RATE_HZ;
            let clean: f64 = partials
                .iter()
                .filter(|p| p.amp != 0.0)
                .map(|p| p.amp * (2.0 * PI * p.freq * t + p.phase).sin())
                .sum();
            let eps = if spec.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (clean + eps) * spec.amplitude_scale
        })
        .collect();
    TimeSignal::new(samples, SYNTH_SAMPLE_RATE_HZ)
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))
}

/// Knobs for [`generate_corpus`] beyond the per-call arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusParams {
    pub duration_s: f64,
    pub noise_sigma: f64,
    pub ambiguous_noise_sigma: f64,
    pub teeth_choices: Vec<u32>,
    pub tooth_passing_range_hz: (f64, f64),
    pub structural_mode_range_hz: (f64, f64),
    /// Clearance kept between structural modes and the harmonic grid, on top
    /// of the chatter detune range.
    pub mode_clearance_hz: f64,
    pub chatter_ratio_range: (f64, f64),
    pub ambiguity_range: (f64, f64),
    /// Peak sample level range (log-uniform) after amplitude scaling.
    pub peak_level_range: (f64, f64),
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            duration_s: 1.0,
            noise_sigma: 0.01,
            ambiguous_noise_sigma: 0.02,
            teeth_choices: vec![2, 3, 4, 5, 6],
            tooth_passing_range_hz: (80.0, 400.0),
            structural_mode_range_hz: (600.0, 2200.0),
            mode_clearance_hz: 20.0,
            chatter_ratio_range: (2.0, 4.0),
            ambiguity_range: (0.15, 0.45),
            peak_level_range: (0.05, 0.9),
        }
    }
}

/// One synthesized recording with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub spec: SynthSpec,
    pub signal: TimeSignal,
    pub labels: LabelTrack,
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    /// Text manifest: header keys followed by one `signal` record per item.
    pub fn manifest(&self) -> String {
        let mut out = String::from("# synthetic machining corpus\n");
        let _ = writeln!(out, "version=1");
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "signals={}", self.items.len());
        for class in MachiningClass::ALL {
            let n = self.items.iter().filter(|i| i.spec.class == class).count();
            let a = self
                .items
                .iter()
                .filter(|i| i.spec.class == class && i.ambiguous)
                .count();
            let _ = writeln!(out, "count.{class}={n}");
            let _ = writeln!(out, "ambiguous.{class}={a}");
        }
        for item in &self.items {
            let _ = writeln!(
                out,
                "signal id={} ambiguous={} {}",
                item.id,
                u8::from(item.ambiguous),
                item.spec.to_record()
            );
        }
        out
    }
}

/// Entry of a corpus manifest: which source, whether it is ambiguous, and the
/// generator parameters when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub ambiguous: bool,
    pub spec: Option<SynthSpec>,
}

/// Reads the `signal` records back from [`Corpus::manifest`] output.
pub fn parse_corpus_manifest(text: &str) -> Result<Vec<ManifestEntry>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix("signal ") else {
            continue;
        };
        let kv: BTreeMap<&str, &str> = rest
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let id = kv
            .get("id")
            .ok_or_else(|| format!("line {}: missing id", n + 1))?
            .to_string();
        let ambiguous = matches!(kv.get("ambiguous"), Some(&"1") | Some(&"true"));
        let spec = rest.parse::<SynthSpec>().ok();
        out.push(ManifestEntry {
            id,
            ambiguous,
            spec,
        });
    }
    Ok(out)
}

/// SplitMix64 finalizer, used to derive independent per-signal seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pick_teeth(rpm: f64, params: &CorpusParams, rng: &mut ChaCha8Rng) -> Result<u32, SynthError> {
    let (lo, hi) = params.tooth_passing_range_hz;
    let ok: Vec<u32> = params
        .teeth_choices
        .iter()
        .copied()
        .filter(|&z| {
            let f = f64::from(z) * rpm / 60.0;
            f >= lo && f <= hi
        })
        .collect();
    if ok.is_empty() {
        return Err(SynthError::InfeasibleSpec(format!(
            "no tooth count in {:?} puts {rpm} rpm inside [{lo}, {hi}] Hz",
            params.teeth_choices
        )));
    }
    Ok(ok[rng.random_range(0..ok.len())])
}

fn pick_structural_mode(
    f_tp: f64,
    params: &CorpusParams,
    rng: &mut ChaCha8Rng,
) -> Result<f64, SynthError> {
    let (lo, hi) = params.structural_mode_range_hz;
    let clearance = params.mode_clearance_hz + CHATTER_DETUNE_HZ;
    for _ in 0..10_000 {
        let f = rng.random_range(lo..hi);
        if harmonic_grid_distance(f, f_tp) > clearance {
            return Ok(f);
        }
    }
    Err(SynthError::InfeasibleSpec(format!(
        "no structural mode in [{lo}, {hi}] Hz clears the {f_tp} Hz grid by {clearance} Hz"
    )))
}

/// Builds a class-balanced corpus with `n_per_class` signals per class, the
/// first `round(n_per_class · ambiguous_fraction)` of each class ambiguous.
pub fn generate_corpus(
    n_per_class: usize,
    ambiguous_fraction: f64,
    rpm_choices: &[f64],
    seed: u64,
    params: &CorpusParams,
) -> Result<Corpus, SynthError> {
    if n_per_class == 0 {
        return Err(SynthError::InvalidSpec(
            "n_per_class must be at least 1".into(),
        ));
    }
    if rpm_choices.is_empty() {
        return Err(SynthError::InvalidSpec("rpm_choices is empty".into()));
    }
    if !(0.0..=1.0).contains(&ambiguous_fraction) {
        return Err(SynthError::InvalidSpec(format!(
            "ambiguous_fraction {ambiguous_fraction} outside [0, 1]"
        )));
    }
    let n_ambiguous = (n_per_class as f64 * ambiguous_fraction).round() as usize;

    let mut items = Vec::with_capacity(3 * n_per_class);
    for class in MachiningClass::ALL {
        for i in 0..n_per_class {
            let index = items.len();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
            let rpm = rpm_choices[i % rpm_choices.len()];
            let n_teeth = pick_teeth(rpm, params, &mut rng)?;
            let f_tp = f64::from(n_teeth) * rpm / 60.0;
            let structural_mode_hz = pick_structural_mode(f_tp, params, &mut rng)?;
            let chatter_ratio =
                rng.random_range(params.chatter_ratio_range.0..=params.chatter_ratio_range.1);
            let ambiguous = i < n_ambiguous;
            let ambiguity = if ambiguous {
                rng.random_range(params.ambiguity_range.0..params.ambiguity_range.1)
            } else {
                0.0
            };
            let (lo, hi) = params.peak_level_range;
            let peak_target = (rng.random_range(lo.ln()..=hi.ln())).exp();
            let mut spec = SynthSpec {
                spindle_rpm: rpm,
                n_teeth,
                structural_mode_hz,
                chatter_ratio,
                noise_sigma: if ambiguous {
                    params.ambiguous_noise_sigma
                } else {
                    params.noise_sigma
                },
                amplitude_scale: 1.0,
                duration_s: params.duration_s,
                seed: rng.random(),
                class,
                ambiguity,
            };
            let unit = generate(&spec)?;
            let peak = unit.samples().iter().fold(0.0f64, |m, s| m.max(s.abs()));
            spec.amplitude_scale = if peak > 0.0 { peak_target / peak } else { 1.0 };
            let signal = generate(&spec)?;
            let labels = LabelTrack::single(0.0, signal.duration_s(), class)
                .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
            items.push(CorpusItem {
                id: format!("{}_{:05}", class.name(), i),
                spec,
                signal,
                labels,
                ambiguous,
            });
        }
    }
    Ok(Corpus { seed, items })
}

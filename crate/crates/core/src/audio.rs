//! Audio I/O, band-limited resampling and log-mel features.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Sample rate every model-facing component expects.
pub const MODEL_RATE: u32 = 16_000;
pub const N_FFT: usize = 400;
pub const HOP: usize = 160;
pub const N_MELS: usize = 40;
/// Lower clamp applied before the natural log.
pub const LOG_FLOOR: f64 = 1e-10;

const KAISER_BETA: f64 = 8.0;
const TAPS_PER_PHASE: usize = 64;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("wav format error: {0}")]
    Format(String),
    #[error("unsupported wav encoding: {0}")]
    Unsupported(String),
    #[error("audio too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("invalid waveform: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Mono PCM audio at a known sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::Invalid("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::Invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn map_hound(err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(e) => AudioError::Io(e),
        hound::Error::Unsupported => AudioError::Unsupported("codec not supported".into()),
        other => AudioError::Format(other.to_string()),
    }
}

/// Reads a RIFF/WAVE file (PCM16 or IEEE float32, one or two channels) as mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let reader = hound::WavReader::open(path.as_ref()).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(AudioError::Unsupported(format!(
            "{} channels",
            spec.channels
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(AudioError::Unsupported(format!("{fmt:?} with {bits} bits")));
        }
    };
    let channels = spec.channels as usize;
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono PCM16 file. Samples outside [-1, 1] are clipped.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(map_hound)?;
    for &s in &wave.samples {
        writer.write_sample(pcm16(s)).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)
}

/// Float-to-PCM16 quantization used by [`write_wav`].
pub fn pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(offset: f64, half_width: f64) -> f64 {
    let r = offset / half_width;
    if r.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Windowed-sinc resampling to `target_rate`.
///
/// Each output sample is a 64-tap Kaiser-windowed sinc interpolation of the
/// input around its exact rational position. When downsampling the kernel
/// cutoff follows the output Nyquist frequency.
pub fn resample(wave: &Waveform, target_rate: u32) -> Result<Waveform, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::Invalid("target rate must be positive".into()));
    }
    let src_rate = wave.sample_rate;
    if src_rate == target_rate {
        return Ok(wave.clone());
    }
    if wave.is_empty() {
        return Waveform::new(Vec::new(), target_rate);
    }
    let g = gcd(src_rate as u64, target_rate as u64);
    let step_num = src_rate as u64 / g;
    let step_den = target_rate as u64 / g;
    let n_in = wave.len();
    let n_out = ((n_in as u64 * step_den).div_ceil(step_num)) as usize;

    let cutoff = (target_rate as f64 / src_rate as f64).min(1.0);
    let half_taps = (TAPS_PER_PHASE / 2) as i64;
    // Kernel support in input samples widens with the stretch factor when downsampling.
    let stretch = 1.0 / cutoff;
    let half_width = half_taps as f64 * stretch;
    let reach = half_width.ceil() as i64;

    let x = wave.samples();
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos_num = n * step_num;
        let base = (pos_num / step_den) as i64;
        let frac = (pos_num % step_den) as f64 / step_den as f64;
        let mut acc = 0.0;
        for k in (base - reach + 1)..=(base + reach) {
            if k < 0 || k >= n_in as i64 {
                continue;
            }
            let offset = (base - k) as f64 + frac;
            let w = kaiser(offset, half_width);
            if w == 0.0 {
                continue;
            }
            acc += x[k as usize] * cutoff * sinc(cutoff * offset) * w;
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate)
}

/// Log-compressed mel-band magnitudes, one row per analysis frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub frame_hop_s: f64,
    pub n_mels: usize,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies of the triangular filters, in Hz.
pub fn mel_center_frequencies(n_mels: usize, f_max: f64) -> Vec<f64> {
    let mel_max = hz_to_mel(f_max);
    (1..=n_mels)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filterbank `[n_mels × (n_fft/2 + 1)]` spanning 0 Hz to `f_max`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, f_max: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let mel_max = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable STFT/mel front end. Construction plans the FFT once.
pub struct MelFrontend {
    n_fft: usize,
    hop: usize,
    n_mels: usize,
    window: Vec<f64>,
    filterbank: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelFrontend {
    pub fn new(n_fft: usize, hop: usize, n_mels: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Self {
            n_fft,
            hop,
            n_mels,
            window: hann(n_fft),
            filterbank: mel_filterbank(n_mels, n_fft, MODEL_RATE, MODEL_RATE as f64 / 2.0),
            fft,
        }
    }

    pub fn compute(&self, wave: &Waveform) -> Result<MelSpectrogram, AudioError> {
        if wave.sample_rate() != MODEL_RATE {
            return Err(AudioError::Invalid(format!(
                "log-mel expects {MODEL_RATE} Hz input, got {}",
                wave.sample_rate()
            )));
        }
        let x = wave.samples();
        if x.len() < self.n_fft {
            return Err(AudioError::TooShort {
                got: x.len(),
                need: self.n_fft,
            });
        }
        let n_frames = 1 + (x.len() - self.n_fft) / self.hop;
        let n_bins = self.n_fft / 2 + 1;
        let mut frames = Array2::zeros((n_frames, self.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut mags = vec![0.0; n_bins];
        for t in 0..n_frames {
            let start = t * self.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(x[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (k, m) in mags.iter_mut().enumerate() {
                *m = buf[k].norm();
            }
            for m in 0..self.n_mels {
                let energy: f64 = self
                    .filterbank
                    .row(m)
                    .iter()
                    .zip(&mags)
                    .map(|(w, v)| w * v)
                    .sum();
                frames[[t, m]] = energy.max(LOG_FLOOR).ln();
            }
        }
        Ok(MelSpectrogram {
            frames,
            frame_hop_s: self.hop as f64 / MODEL_RATE as f64,
            n_mels: self.n_mels,
        })
    }
}

impl Default for MelFrontend {
    fn default() -> Self {
        Self::new(N_FFT, HOP, N_MELS)
    }
}

/// Hann-windowed magnitude STFT (no centering) → triangular mel bank (0–8 kHz) → ln(max(x, 1e-10)).
pub fn log_mel(
    wave: &Waveform,
    n_fft: usize,
    hop: usize,
    n_mels: usize,
) -> Result<MelSpectrogram, AudioError> {
    MelFrontend::new(n_fft, hop, n_mels).compute(wave)
}

/// Full front end used by the model: decode, resample to 16 kHz, log-mel with default params.
pub fn load_features(path: impl AsRef<Path>) -> Result<MelSpectrogram, AudioError> {
    let wave = read_wav(path)?;
    let wave = resample(&wave, MODEL_RATE)?;
    MelFrontend::default().compute(&wave)
}

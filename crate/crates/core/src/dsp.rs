//! Fourier-based feature extraction: STFT magnitude, log magnitude, mel
//! filterbank energies, and MFCC.
//!
//! The DFT is evaluated as two matmuls against fixed windowed cosine/sine
//! bases, so the exact same kernels serve both the pure functions used by
//! metrics and the differentiable graph builders used by the losses — one
//! semantic source for both routes.
//!
//! No center padding: frames exactly cover [0, N), which keeps the frame
//! count formula `1 + (N - window)/hop` exact and clean/noisy pairs of equal
//! length comparable frame by frame.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, RoseError};
use crate::tensor::{Graph, Shape, Tensor, Var};

/// STFT and cepstral analysis parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StftConfig {
    /// FFT length; frames are zero-padded from `window_len` up to this.
    pub fft_bins: usize,
    /// Hop between frame starts, in samples.
    pub hop: usize,
    /// Analysis window length, in samples (Hann).
    pub window_len: usize,
    /// Number of triangular mel bands.
    pub mel_bands: usize,
    /// Number of cepstral coefficients kept.
    pub mfcc_dim: usize,
    pub sample_rate: u32,
    /// Floor applied inside logs to avoid -inf on silence.
    pub log_floor: f32,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_bins: 512,
            hop: 100,
            window_len: 400,
            mel_bands: 40,
            mfcc_dim: 13,
            sample_rate: 16000,
            log_floor: 1e-7,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len > self.fft_bins {
            return Err(RoseError::Config(format!(
                "window_len {} exceeds fft_bins {}",
                self.window_len, self.fft_bins
            )));
        }
        if self.hop == 0 || self.window_len == 0 {
            return Err(RoseError::Config("hop and window_len must be >= 1".into()));
        }
        if self.mfcc_dim > self.mel_bands {
            return Err(RoseError::Config(format!(
                "mfcc_dim {} exceeds mel_bands {}",
                self.mfcc_dim, self.mel_bands
            )));
        }
        Ok(())
    }

    /// Onesided spectrum size: bins 0..=fft_bins/2.
    pub fn bins(&self) -> usize {
        self.fft_bins / 2 + 1
    }

    /// Number of frames for a signal of `n` samples, valid for n >= window.
    pub fn frame_count(&self, n: usize) -> Result<usize> {
        if n < self.window_len {
            return Err(RoseError::Length(format!(
                "signal of {} samples is shorter than one window of {}",
                n, self.window_len
            )));
        }
        Ok(1 + (n - self.window_len) / self.hop)
    }
}

/// What a feature matrix holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Magnitude,
    LogMagnitude,
    Mel,
    Mfcc,
}

/// frames x bins (or frames x coefficients) feature matrix.
#[derive(Clone, Debug)]
pub struct SpectralFeatures {
    pub matrix: Tensor,
    pub kind: FeatureKind,
}

impl SpectralFeatures {
    pub fn frames(&self) -> usize {
        self.matrix.shape().dims()[0]
    }

    pub fn bins(&self) -> usize {
        self.matrix.shape().dims()[1]
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()) as f32)
        .collect()
}

/// Fixed analysis matrices derived from a [`StftConfig`]: windowed DFT
/// cosine/sine bases, mel filterbank weights, and the orthonormal DCT-II.
pub struct Bases {
    pub cfg: StftConfig,
    /// [window_len x bins], window folded in.
    pub cos: Tensor,
    /// [window_len x bins], window folded in (negative sine of the forward DFT).
    pub sin: Tensor,
    /// [bins x mel_bands] triangular filters, applied to power spectra.
    pub mel: Tensor,
    /// [mel_bands x mfcc_dim] orthonormal DCT-II.
    pub dct: Tensor,
}

impl Bases {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let bins = cfg.bins();
        let w = hann_window(cfg.window_len);
        let mut cos = vec![0.0f32; cfg.window_len * bins];
        let mut sin = vec![0.0f32; cfg.window_len * bins];
        for n in 0..cfg.window_len {
            for k in 0..bins {
                let angle = 2.0 * PI * k as f64 * n as f64 / cfg.fft_bins as f64;
                cos[n * bins + k] = w[n] * angle.cos() as f32;
                sin[n * bins + k] = -w[n] * angle.sin() as f32;
            }
        }
        let mel = mel_filter_matrix(&cfg);
        let dct = dct_matrix(cfg.mel_bands, cfg.mfcc_dim);
        Ok(Bases {
            cfg,
            cos: Tensor::new(Shape::r2(cfg.window_len, bins), cos)?,
            sin: Tensor::new(Shape::r2(cfg.window_len, bins), sin)?,
            mel: Tensor::new(Shape::r2(bins, cfg.mel_bands), mel)?,
            dct: Tensor::new(Shape::r2(cfg.mel_bands, cfg.mfcc_dim), dct)?,
        })
    }

    /// Place the fixed matrices on a tape as constants.
    pub fn bind(&self, g: &mut Graph) -> BasesVars {
        BasesVars {
            cos: g.constant(self.cos.clone()),
            sin: g.constant(self.sin.clone()),
            mel: g.constant(self.mel.clone()),
            dct: g.constant(self.dct.clone()),
        }
    }
}

/// Tape handles for the fixed analysis matrices.
#[derive(Clone, Copy)]
pub struct BasesVars {
    pub cos: Var,
    pub sin: Var,
    pub mel: Var,
    pub dct: Var,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular mel filters, lowest first.
pub fn mel_center_frequencies(cfg: &StftConfig) -> Vec<f64> {
    let mel_hi = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    (1..=cfg.mel_bands)
        .map(|m| mel_to_hz(mel_hi * m as f64 / (cfg.mel_bands + 1) as f64))
        .collect()
}

/// [bins x mel_bands] matrix of triangular filters on the power spectrum,
/// mel-spaced from 0 Hz to Nyquist.
fn mel_filter_matrix(cfg: &StftConfig) -> Vec<f32> {
    let bins = cfg.bins();
    let mel_hi = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let corners: Vec<f64> = (0..cfg.mel_bands + 2)
        .map(|m| mel_to_hz(mel_hi * m as f64 / (cfg.mel_bands + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_bins as f64;
    let mut out = vec![0.0f32; bins * cfg.mel_bands];
    for m in 0..cfg.mel_bands {
        let (lo, mid, hi) = (corners[m], corners[m + 1], corners[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let v = if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            if v > 0.0 {
                out[k * cfg.mel_bands + m] = v as f32;
            }
        }
    }
    out
}

/// [mel_bands x mfcc_dim] orthonormal DCT-II.
fn dct_matrix(mel_bands: usize, mfcc_dim: usize) -> Vec<f32> {
    let m = mel_bands as f64;
    let mut out = vec![0.0f32; mel_bands * mfcc_dim];
    for band in 0..mel_bands {
        for j in 0..mfcc_dim {
            let scale = if j == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            let v = scale * (PI * j as f64 * (band as f64 + 0.5) / m).cos();
            out[band * mfcc_dim + j] = v as f32;
        }
    }
    out
}

// ---- differentiable graph builders ------------------------------------------

/// STFT magnitude of a rank-1 signal node: [N] -> [frames x bins].
pub fn stft_magnitude_graph(g: &mut Graph, x: Var, bases: &BasesVars, cfg: &StftConfig) -> Result<Var> {
    let frames = g.frames(x, cfg.window_len, cfg.hop)?;
    let re = g.matmul(frames, bases.cos)?;
    let im = g.matmul(frames, bases.sin)?;
    g.magnitude(re, im)
}

/// Entry-wise ln(max(m, log_floor)).
pub fn log_magnitude_graph(g: &mut Graph, magnitude: Var, cfg: &StftConfig) -> Var {
    g.log_floor(magnitude, cfg.log_floor)
}

/// Mel-band energies of a magnitude node (power-spectrum filtering).
pub fn mel_energies_graph(g: &mut Graph, magnitude: Var, bases: &BasesVars) -> Result<Var> {
    let power = g.square(magnitude);
    g.matmul(power, bases.mel)
}

/// MFCC matrix of a rank-1 signal node: [N] -> [frames x mfcc_dim].
pub fn mfcc_graph(g: &mut Graph, x: Var, bases: &BasesVars, cfg: &StftConfig) -> Result<Var> {
    let mag = stft_magnitude_graph(g, x, bases, cfg)?;
    mfcc_from_magnitude_graph(g, mag, bases, cfg)
}

/// MFCC from an existing magnitude node (lets callers share the STFT).
pub fn mfcc_from_magnitude_graph(
    g: &mut Graph,
    magnitude: Var,
    bases: &BasesVars,
    cfg: &StftConfig,
) -> Result<Var> {
    let mel = mel_energies_graph(g, magnitude, bases)?;
    let logmel = g.log_floor(mel, cfg.log_floor);
    g.matmul(logmel, bases.dct)
}

// ---- pure functions (same kernels, throwaway tape) ---------------------------

fn run_pure(x: &[f32], bases: &Bases, f: impl FnOnce(&mut Graph, Var, &BasesVars) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::from_slice1(x));
    let bv = bases.bind(&mut g);
    let out = f(&mut g, xv, &bv)?;
    Ok(g.value(out).clone())
}

/// Per frame: Hann window, zero-pad to `fft_bins`, real DFT, modulus of the
/// onesided bins. No center padding.
pub fn stft_magnitude_with(x: &[f32], bases: &Bases) -> Result<SpectralFeatures> {
    let matrix = run_pure(x, bases, |g, xv, bv| stft_magnitude_graph(g, xv, bv, &bases.cfg))?;
    Ok(SpectralFeatures { matrix, kind: FeatureKind::Magnitude })
}

pub fn stft_magnitude(x: &[f32], cfg: &StftConfig) -> Result<SpectralFeatures> {
    stft_magnitude_with(x, &Bases::new(*cfg)?)
}

/// Entry-wise ln(max(m, log_floor)) of a magnitude matrix.
pub fn log_magnitude(m: &SpectralFeatures, cfg: &StftConfig) -> Result<SpectralFeatures> {
    if m.kind != FeatureKind::Magnitude {
        return Err(RoseError::Contract(format!(
            "log_magnitude expects magnitude features, got {:?}",
            m.kind
        )));
    }
    let data: Vec<f32> = m.matrix.data().iter().map(|&v| v.max(cfg.log_floor).ln()).collect();
    Ok(SpectralFeatures {
        matrix: Tensor::new(m.matrix.shape(), data)?,
        kind: FeatureKind::LogMagnitude,
    })
}

/// Triangular mel filterbank applied to the power spectrum of a magnitude
/// matrix: [frames x bins] -> [frames x mel_bands].
pub fn mel_filterbank(m: &SpectralFeatures, bases: &Bases) -> Result<SpectralFeatures> {
    if m.kind != FeatureKind::Magnitude {
        return Err(RoseError::Contract(format!(
            "mel_filterbank expects magnitude features, got {:?}",
            m.kind
        )));
    }
    let mut g = Graph::new();
    let mv = g.constant(m.matrix.clone());
    let bv = bases.bind(&mut g);
    let out = mel_energies_graph(&mut g, mv, &bv)?;
    Ok(SpectralFeatures { matrix: g.value(out).clone(), kind: FeatureKind::Mel })
}

/// MFCC features: orthonormal DCT-II of the floored log mel energies,
/// keeping coefficients 0..mfcc_dim.
pub fn mfcc_with(x: &[f32], bases: &Bases) -> Result<SpectralFeatures> {
    let matrix = run_pure(x, bases, |g, xv, bv| mfcc_graph(g, xv, bv, &bases.cfg))?;
    Ok(SpectralFeatures { matrix, kind: FeatureKind::Mfcc })
}

pub fn mfcc(x: &[f32], cfg: &StftConfig) -> Result<SpectralFeatures> {
    mfcc_with(x, &Bases::new(*cfg)?)
}

// ---- spectrogram export -------------------------------------------------------

/// Dump a magnitude matrix as a binary PGM: rows are frequency bins with low
/// frequencies at the bottom, columns are frames, dB-scaled and clipped to
/// [-80, 0] dB relative to the matrix maximum.
pub fn write_spectrogram_pgm(m: &SpectralFeatures, path: impl AsRef<Path>) -> Result<()> {
    if m.kind != FeatureKind::Magnitude {
        return Err(RoseError::Contract(format!(
            "spectrogram dump expects magnitude features, got {:?}",
            m.kind
        )));
    }
    let (frames, bins) = (m.frames(), m.bins());
    let peak = m.matrix.data().iter().fold(0.0f32, |a, &b| a.max(b));
    let mut out = Vec::with_capacity(64 + frames * bins);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", frames, bins).as_bytes());
    for row in 0..bins {
        let bin = bins - 1 - row; // low frequency at the bottom
        for frame in 0..frames {
            let v = m.matrix.at2(frame, bin);
            let db = if peak > 0.0 && v > 0.0 {
                (20.0 * (v / peak).log10()).clamp(-80.0, 0.0)
            } else {
                -80.0
            };
            out.push(((db + 80.0) / 80.0 * 255.0).round() as u8);
        }
    }
    let mut f = std::fs::File::create(path.as_ref())?;
    f.write_all(&out)?;
    Ok(())
}

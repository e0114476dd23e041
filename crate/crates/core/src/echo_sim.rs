//! Paired clean/noisy corpus synthesis: the simulative radio-echo channel
//! and the additive-noise mixer.
//!
//! The echo channel models the controller working position, where a sent
//! utterance and its radio-returned copy are summed: the clean signal plus a
//! 30 dB noise floor (sent path) is overlaid with a delayed copy carrying a
//! 10 dB floor (received path), the delay drawn uniformly in samples from a
//! 10..200 ms range. The received path is shifted by a zero prefix and the
//! sum truncated to the clean length, so pairs stay aligned sample for
//! sample.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio_io::{self, AudioClip};
use crate::error::{Result, RoseError};

/// Parameters of the simulative echo channel.
#[derive(Clone, Copy, Debug)]
pub struct EchoParams {
    /// Delay range in milliseconds, inclusive on both ends.
    pub delay_ms: (f64, f64),
    /// SNR of the Gaussian floor on the sent path, dB.
    pub sent_snr_db: f64,
    /// SNR of the Gaussian floor on the received path, dB.
    pub received_snr_db: f64,
    pub seed: u64,
}

impl Default for EchoParams {
    fn default() -> Self {
        EchoParams { delay_ms: (10.0, 200.0), sent_snr_db: 30.0, received_snr_db: 10.0, seed: 0 }
    }
}

impl EchoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delay_ms.0 > 0.0 || self.delay_ms == (0.0, 0.0)) || self.delay_ms.0 > self.delay_ms.1 {
            return Err(RoseError::Config(format!(
                "invalid delay range {:?} ms",
                self.delay_ms
            )));
        }
        Ok(())
    }

    /// Delay bounds converted to samples at `rate`.
    pub fn delay_samples(&self, rate: u32) -> (usize, usize) {
        let lo = (self.delay_ms.0 * rate as f64 / 1000.0).round() as usize;
        let hi = (self.delay_ms.1 * rate as f64 / 1000.0).round() as usize;
        (lo, hi)
    }
}

/// Parameters of the additive-noise mixer.
#[derive(Clone, Copy, Debug)]
pub struct MixParams {
    pub snr_db: f64,
    pub seed: u64,
}

/// Deterministic generator used by all synthesis entry points.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal draws via Box-Muller on the given generator.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

/// Zero-mean Gaussian noise scaled so that
/// `10 log10(P_signal / P_noise) = snr_db`, same length as `signal`.
pub fn gaussian_noise_at_snr(signal: &[f32], snr_db: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let p_signal =
        signal.iter().map(|&s| s as f64 * s as f64).sum::<f64>() / signal.len().max(1) as f64;
    if p_signal <= 0.0 {
        return Err(RoseError::DegenerateInput(
            "cannot scale noise against a silent signal".into(),
        ));
    }
    let sigma = (p_signal / 10f64.powf(snr_db / 10.0)).sqrt();
    Ok((0..signal.len()).map(|_| (sigma * normal(rng)) as f32).collect())
}

/// Run the clean clip through the simulative echo channel. Returns the noisy
/// clip (same length, peak-normalized to 0.9 if the sum exceeds 1.0) and the
/// drawn delay in samples.
pub fn simulate_echo(
    clean: &AudioClip,
    p: &EchoParams,
    rng: &mut ChaCha8Rng,
) -> Result<(AudioClip, usize)> {
    p.validate()?;
    let n = clean.len();
    let (dlo, dhi) = p.delay_samples(clean.sample_rate);
    if dhi >= n {
        return Err(RoseError::Length(format!(
            "clean clip of {} samples is not longer than the max delay of {} samples",
            n, dhi
        )));
    }
    let delay = if dhi == dlo { dlo } else { rng.gen_range(dlo..=dhi) };

    let sent_noise = gaussian_noise_at_snr(&clean.samples, p.sent_snr_db, rng)?;
    let recv_noise = gaussian_noise_at_snr(&clean.samples, p.received_snr_db, rng)?;

    let mut noisy = vec![0.0f32; n];
    for t in 0..n {
        let sent = clean.samples[t] + sent_noise[t];
        let received = if t >= delay {
            clean.samples[t - delay] + recv_noise[t - delay]
        } else {
            0.0
        };
        noisy[t] = sent + received;
    }
    let peak = noisy.iter().fold(0.0f32, |a, &b| a.max(b.abs()));
    if peak > 1.0 {
        let scale = 0.9 / peak;
        for v in &mut noisy {
            *v *= scale;
        }
    }
    Ok((AudioClip::new(noisy, clean.sample_rate), delay))
}

/// Mix `clean` with a segment of `noise` scaled to the requested SNR. The
/// segment starts at a random offset and wraps around if the noise is
/// shorter than the clip.
pub fn mix_additive_noise(clean: &AudioClip, noise: &AudioClip, p: &MixParams) -> Result<AudioClip> {
    let mut rng = seeded_rng(p.seed);
    let n = clean.len();
    let p_clean = clean.power();
    if p_clean <= 0.0 {
        return Err(RoseError::DegenerateInput("clean signal is silent".into()));
    }
    if noise.is_empty() || noise.power() <= 0.0 {
        return Err(RoseError::DegenerateInput("noise source is silent".into()));
    }
    let offset = rng.gen_range(0..noise.len());
    let segment: Vec<f64> = (0..n).map(|i| noise.samples[(offset + i) % noise.len()] as f64).collect();
    let p_segment = segment.iter().map(|&v| v * v).sum::<f64>() / n as f64;
    if p_segment <= 0.0 {
        return Err(RoseError::DegenerateInput("selected noise segment is silent".into()));
    }
    let alpha = (p_clean / (p_segment * 10f64.powf(p.snr_db / 10.0))).sqrt();
    let noisy: Vec<f32> = clean
        .samples
        .iter()
        .zip(&segment)
        .map(|(&c, &nz)| c + (alpha * nz) as f32)
        .collect();
    Ok(AudioClip::new(noisy, clean.sample_rate))
}

/// Corpus operating mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthMode {
    Echo,
    Additive,
}

impl SynthMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SynthMode::Echo => "echo",
            SynthMode::Additive => "additive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "echo" => Ok(SynthMode::Echo),
            "additive" => Ok(SynthMode::Additive),
            other => Err(RoseError::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Settings for corpus synthesis.
#[derive(Clone, Debug)]
pub struct SynthParams {
    pub mode: SynthMode,
    pub seed: u64,
    /// Output sample rate; sources are resampled to this.
    pub sample_rate: u32,
    /// Output clip length in seconds (fit by truncation / zero padding).
    pub clip_seconds: f64,
    pub echo: EchoParams,
    /// SNR levels cycled through pair by pair in additive mode.
    pub snr_levels_db: Vec<f64>,
    /// Noise source for additive mode; Gaussian white noise when absent.
    pub noise_path: Option<PathBuf>,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            mode: SynthMode::Echo,
            seed: 0,
            sample_rate: 16000,
            clip_seconds: 4.0,
            echo: EchoParams::default(),
            snr_levels_db: vec![-3.0, 0.0, 3.0, 6.0],
            noise_path: None,
        }
    }
}

/// One row of the corpus manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub index: usize,
    pub clean_path: PathBuf,
    pub noisy_path: PathBuf,
    pub mode: SynthMode,
    pub delay_samples: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub normalized: bool,
}

/// The corpus manifest: one row per clean/noisy pair.
#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_HEADER: &str =
    "index,clean_path,noisy_path,mode,delay_samples,snr_db,seed,normalized";

impl Manifest {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.index,
                r.clean_path.display(),
                r.noisy_path.display(),
                r.mode.as_str(),
                r.delay_samples,
                r.snr_db,
                r.seed,
                r.normalized
            )
            .expect("writing to String cannot fail");
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == MANIFEST_HEADER => {}
            other => {
                return Err(RoseError::format(
                    path,
                    format!("bad manifest header: {:?}", other.unwrap_or("")),
                ))
            }
        }
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(RoseError::format(
                    path,
                    format!("line {}: expected 8 fields, got {}", lineno + 2, fields.len()),
                ));
            }
            let parse_err = |what: &str| {
                RoseError::format(path, format!("line {}: bad {what}", lineno + 2))
            };
            rows.push(ManifestRow {
                index: fields[0].parse().map_err(|_| parse_err("index"))?,
                clean_path: PathBuf::from(fields[1]),
                noisy_path: PathBuf::from(fields[2]),
                mode: SynthMode::parse(fields[3])?,
                delay_samples: fields[4].parse().map_err(|_| parse_err("delay_samples"))?,
                snr_db: fields[5].parse().map_err(|_| parse_err("snr_db"))?,
                seed: fields[6].parse().map_err(|_| parse_err("seed"))?,
                normalized: fields[7].parse().map_err(|_| parse_err("normalized"))?,
            });
        }
        Ok(Manifest { rows })
    }
}

/// Synthesize a paired corpus from source clips. Writes `clean_NNN.wav` /
/// `noisy_NNN.wav` pairs at the target rate and clip length plus
/// `manifest.csv` into `out_dir`, and returns the manifest.
///
/// Pair i uses the derived seed `base_seed + i`, so re-running with the same
/// parameters reproduces the corpus byte for byte, independent of ordering.
pub fn synth_corpus(
    source_paths: &[PathBuf],
    out_dir: impl AsRef<Path>,
    params: &SynthParams,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if source_paths.is_empty() {
        return Err(RoseError::Config("no source clips given".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let noise_clip = match (&params.noise_path, params.mode) {
        (Some(p), SynthMode::Additive) => {
            let clip = audio_io::read_wav(p)?;
            Some(audio_io::resample_linear(&clip, params.sample_rate))
        }
        _ => None,
    };

    let mut manifest = Manifest::default();
    for (i, src) in source_paths.iter().enumerate() {
        let seed = params.seed.wrapping_add(i as u64);
        let clip = audio_io::read_wav(src)?;
        let clip = audio_io::resample_linear(&clip, params.sample_rate);
        let clean = audio_io::fit_length(&clip, params.clip_seconds);

        let mut rng = seeded_rng(seed);
        let (noisy, delay, snr_db) = match params.mode {
            SynthMode::Echo => {
                let p = EchoParams { seed, ..params.echo };
                let (noisy, delay) = simulate_echo(&clean, &p, &mut rng)?;
                // The received-path floor is what the manifest reports; the
                // sent-path floor is fixed by the channel parameters.
                (noisy, delay, p.received_snr_db)
            }
            SynthMode::Additive => {
                let snr = params.snr_levels_db[i % params.snr_levels_db.len()];
                let noisy = match &noise_clip {
                    Some(noise) => {
                        mix_additive_noise(&clean, noise, &MixParams { snr_db: snr, seed })?
                    }
                    None => {
                        let noise = gaussian_noise_at_snr(&clean.samples, snr, &mut rng)?;
                        AudioClip::new(
                            clean.samples.iter().zip(&noise).map(|(&c, &n)| c + n).collect(),
                            clean.sample_rate,
                        )
                    }
                };
                (noisy, 0, snr)
            }
        };
        let normalized = {
            // Detect whether echo normalization fired: the clean sum would
            // have exceeded 1.0. Recorded in the manifest for transparency.
            params.mode == SynthMode::Echo && {
                let peak = noisy.samples.iter().fold(0.0f32, |a, &b| a.max(b.abs()));
                (peak - 0.9).abs() < 1e-6
            }
        };

        let clean_path = out_dir.join(format!("clean_{i:04}.wav"));
        let noisy_path = out_dir.join(format!("noisy_{i:04}.wav"));
        audio_io::write_wav(&clean, &clean_path)?;
        audio_io::write_wav(&noisy, &noisy_path)?;
        manifest.rows.push(ManifestRow {
            index: i,
            clean_path,
            noisy_path,
            mode: params.mode,
            delay_samples: delay,
            snr_db,
            seed,
            normalized,
        });
    }
    manifest.save(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Measured SNR in dB between a reference signal and a noise vector.
pub fn measured_snr_db(signal: &[f32], noise: &[f32]) -> f64 {
    let ps = signal.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
    let pn = noise.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
    10.0 * (ps / pn).log10()
}

/// Lag of the largest cross-correlation peak of `noisy` against `clean`,
/// excluding lag zero. Used as the independent recovery oracle for the echo
/// delay.
pub fn dominant_echo_lag(clean: &[f32], noisy: &[f32], max_lag: usize) -> usize {
    let n = clean.len().min(noisy.len());
    let mut best = (1usize, f64::MIN);
    for lag in 1..=max_lag.min(n - 1) {
        let mut acc = 0.0f64;
        for t in lag..n {
            acc += clean[t - lag] as f64 * noisy[t] as f64;
        }
        if acc > best.1 {
            best = (lag, acc);
        }
    }
    best.0
}

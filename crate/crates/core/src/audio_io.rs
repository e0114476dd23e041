//! WAV ingestion/emission, resampling and length normalization.
//!
//! Only 16-bit PCM mono RIFF/WAVE is supported; unknown chunks are skipped on
//! read. The resampler is plain linear interpolation — synthetic corpora are
//! generated natively at the target rate, so resampling quality is not
//! critical here, but it is a known quality limitation for real recordings.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, RoseError};

/// A mono waveform in [-1, 1] plus its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        AudioClip { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean square of the samples.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| s as f64 * s as f64).sum::<f64>() / self.samples.len() as f64
    }
}

fn read_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn read_u16(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

/// Read a PCM 16-bit mono WAV file. Samples are scaled by 1/32768 into
/// [-1, 1). Chunks other than `fmt ` and `data` are skipped.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let fail = |detail: String| RoseError::format(path, detail);

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(fail("missing RIFF magic".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(fail("RIFF form type is not WAVE".into()));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(&bytes, pos + 4) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(fail(format!(
                "chunk {:?} of {} bytes overruns the file",
                String::from_utf8_lossy(id),
                size
            )));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail("fmt chunk shorter than 16 bytes".into()));
                }
                fmt = Some((read_u16(body, 0), read_u16(body, 2), read_u32(body, 4), read_u16(body, 14)));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned; a pad byte follows odd sizes.
        pos = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| fail("no fmt chunk".into()))?;
    if format != 1 {
        return Err(fail(format!("audio_format = {format}, only PCM (1) supported")));
    }
    if channels != 1 {
        return Err(fail(format!("num_channels = {channels}, only mono supported")));
    }
    if bits != 16 {
        return Err(fail(format!("bits_per_sample = {bits}, only 16-bit supported")));
    }
    if rate == 0 {
        return Err(fail("sample_rate = 0".into()));
    }
    let data = data.ok_or_else(|| fail("no data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(fail("data chunk has an odd byte count".into()));
    }
    let samples: Vec<f32> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Ok(AudioClip { samples, sample_rate: rate })
}

/// Write a PCM 16-bit mono WAV file with the canonical 44-byte header.
/// Samples outside [-1, 1] are clamped; quantization rounds half away
/// from zero.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = clip.samples.len();
    let data_bytes = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_bytes.to_le_bytes());
    for &s in &clip.samples {
        out.extend_from_slice(&quantize_i16(s).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Round half away from zero, then clamp to the i16 range.
pub fn quantize_i16(sample: f32) -> i16 {
    let scaled = (sample as f64 * 32768.0).round();
    scaled.clamp(-32768.0, 32767.0) as i16
}

/// Resample by linear interpolation. Output length is
/// round(len * target / source).
pub fn resample_linear(clip: &AudioClip, target_rate: u32) -> AudioClip {
    if target_rate == clip.sample_rate || clip.samples.is_empty() {
        return AudioClip::new(clip.samples.clone(), target_rate);
    }
    let src = &clip.samples;
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let out_len = (src.len() as f64 / ratio).round() as usize;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * ratio;
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        let a = src[i0.min(src.len() - 1)] as f64;
        let b = src[(i0 + 1).min(src.len() - 1)] as f64;
        out.push((a + (b - a) * frac) as f32);
    }
    AudioClip::new(out, target_rate)
}

/// Truncate or zero-pad (at the tail) to exactly `seconds` long.
pub fn fit_length(clip: &AudioClip, seconds: f64) -> AudioClip {
    let target = (seconds * clip.sample_rate as f64).round() as usize;
    let mut samples = clip.samples.clone();
    samples.resize(target, 0.0);
    AudioClip::new(samples, clip.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scaling_definition() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scale.wav");
        // Hand-build a file with samples [0, 16384, -32768].
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 6).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&6u32.to_le_bytes());
        for v in [0i16, 16384, -32768] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.sample_rate, 8000);
        assert_eq!(clip.samples, vec![0.0, 0.5, -1.0]);
    }

    #[test]
    fn canonical_header_fields_match_hand_decoded_fixture() {
        // 3-sample fixture via write_wav, then decode the 44-byte header by hand.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hdr.wav");
        let clip = AudioClip::new(vec![0.0, 0.25, -0.25], 16000);
        write_wav(&clip, &path).unwrap();
        let b = std::fs::read(&path).unwrap();
        assert_eq!(&b[0..4], b"RIFF");
        assert_eq!(read_u32(&b, 4), 36 + 6);
        assert_eq!(&b[8..12], b"WAVE");
        assert_eq!(&b[12..16], b"fmt ");
        assert_eq!(read_u32(&b, 16), 16);
        assert_eq!(read_u16(&b, 20), 1); // PCM
        assert_eq!(read_u16(&b, 22), 1); // mono
        assert_eq!(read_u32(&b, 24), 16000);
        assert_eq!(read_u32(&b, 28), 32000); // byte rate
        assert_eq!(read_u16(&b, 32), 2); // block align
        assert_eq!(read_u16(&b, 34), 16); // bits
        assert_eq!(&b[36..40], b"data");
        assert_eq!(read_u32(&b, 40), 6);
        assert_eq!(b.len(), 44 + 6);
    }

    #[test]
    fn quantization_examples() {
        assert_eq!(quantize_i16(0.0), 0);
        assert_eq!(quantize_i16(1.0), 32767); // clamped from 32768
        assert_eq!(quantize_i16(-1.0), -32768);
    }

    #[test]
    fn roundtrip_error_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let samples: Vec<f32> = (0..2048).map(|_| r.gen_range(-1.0..1.0)).collect();
        let clip = AudioClip::new(samples.clone(), 16000);
        write_wav(&clip, &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), clip.len());
        let max_err = samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 32768.0 + 1e-9, "round-trip error {max_err}");
    }

    #[test]
    fn rejects_malformed_headers_naming_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        let clip = AudioClip::new(vec![0.1, 0.2], 8000);
        write_wav(&clip, &path).unwrap();
        let mut b = std::fs::read(&path).unwrap();
        b[22] = 2; // stereo
        std::fs::write(&path, &b).unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(err.to_string().contains("num_channels"), "got: {err}");

        let mut b2 = std::fs::read(&path).unwrap();
        b2[22] = 1;
        b2[20] = 3; // IEEE float
        std::fs::write(&path, &b2).unwrap();
        let err2 = read_wav(&path).unwrap_err();
        assert!(err2.to_string().contains("audio_format"), "got: {err2}");
    }

    #[test]
    fn resample_constant_stays_constant() {
        let clip = AudioClip::new(vec![0.4; 800], 8000);
        let up = resample_linear(&clip, 16000);
        assert_eq!(up.len(), 1600);
        assert!(up.samples.iter().all(|&v| (v - 0.4).abs() < 1e-7));
        let down = resample_linear(&clip, 4000);
        assert_eq!(down.len(), 400);
        assert!(down.samples.iter().all(|&v| (v - 0.4).abs() < 1e-7));
    }

    #[test]
    fn resample_ramp_interleaves_midpoints() {
        let clip = AudioClip::new(vec![0.0, 1.0, 2.0, 3.0], 8000);
        let up = resample_linear(&clip, 16000);
        assert_eq!(up.len(), 8);
        for (i, expect) in [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0].iter().enumerate() {
            assert!((up.samples[i] - expect).abs() < 1e-6, "at {i}");
        }
    }

    #[test]
    fn resample_preserves_duration_within_one_sample() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = r.gen_range(100..5000);
            let clip = AudioClip::new(vec![0.1; n], 8000);
            let up = resample_linear(&clip, 16000);
            let d0 = clip.duration_seconds();
            let d1 = up.duration_seconds();
            assert!((d0 - d1).abs() <= 1.0 / 16000.0 + 1e-12);
        }
    }

    #[test]
    fn fit_length_truncates_pads_and_is_idempotent() {
        let clip = AudioClip::new((0..5 * 8000).map(|i| (i % 7) as f32 / 10.0).collect(), 8000);
        let four = fit_length(&clip, 4.0);
        assert_eq!(four.len(), 32000);
        assert_eq!(four.samples[..], clip.samples[..32000]);

        let three = AudioClip::new(vec![0.3; 3 * 8000], 8000);
        let padded = fit_length(&three, 4.0);
        assert_eq!(padded.len(), 32000);
        assert!(padded.samples[24000..].iter().all(|&v| v == 0.0));

        let twice = fit_length(&fit_length(&clip, 4.0), 4.0);
        assert_eq!(twice, four);
    }
}

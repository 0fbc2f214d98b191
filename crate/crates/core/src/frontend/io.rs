//! WAV input and the FMAT1 feature-matrix file format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FMAT_MAGIC: &[u8; 5] = b"FMAT1";

/// Decoded mono audio scaled to `[-1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Audio {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

/// Read a mono 16-bit PCM WAV file.
pub fn read_wav(path: &Path) -> Result<Audio> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Audio(format!(
            "{}: expected mono 16-bit PCM, got {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Ok(Audio {
        samples,
        sample_rate_hz: spec.sample_rate,
    })
}

/// Write mono 16-bit PCM, clipping to the representable range.
pub fn write_wav(path: &Path, audio: &Audio) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &audio.samples {
        w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
            .map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

pub fn encode_fmat(m: &Tensor<f32>) -> Result<Vec<u8>> {
    if m.rank() != 2 {
        return Err(Error::format(
            "FMAT1",
            format!("expected a 2-D matrix, got rank {}", m.rank()),
        ));
    }
    let (rows, cols) = (m.dim(0), m.dim(1));
    let too_big = |n: usize| u32::try_from(n).map_err(|_| Error::format("FMAT1", "dimension exceeds u32"));
    let mut out = Vec::with_capacity(13 + 4 * m.len());
    out.extend_from_slice(FMAT_MAGIC);
    out.extend_from_slice(&too_big(rows)?.to_le_bytes());
    out.extend_from_slice(&too_big(cols)?.to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_fmat(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 13 || &bytes[..5] != FMAT_MAGIC {
        return Err(Error::format("FMAT1", "missing FMAT1 header"));
    }
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = &bytes[13..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format("FMAT1", "dimensions overflow"))?;
    if body.len() != expected {
        return Err(Error::format(
            "FMAT1",
            format!("{rows}x{cols} matrix needs {expected} data bytes, found {}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&[rows, cols], data)
}

pub fn write_fmat(path: &Path, m: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_fmat(m)?).map_err(|e| Error::io(path, e))
}

pub fn read_fmat(path: &Path) -> Result<Tensor<f32>> {
    decode_fmat(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

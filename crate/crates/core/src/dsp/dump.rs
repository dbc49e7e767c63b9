//! Plain-file exports of mel-spectrograms.
//!
//! The dump format is one ASCII header line
//! `DPN-MEL v1 <n_mels> <n_frames> <sample_rate> <n_fft> <hop>` followed by
//! `n_mels * n_frames` little-endian `f64` values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::mel::MelSpectrogram;

const MAGIC: &str = "DPN-MEL";

pub fn encode_mel(mel: &MelSpectrogram) -> Vec<u8> {
    let mut out = format!(
        "{MAGIC} v1 {} {} {} {} {}\n",
        mel.n_mels,
        mel.n_frames(),
        mel.sample_rate,
        mel.n_fft,
        mel.hop
    )
    .into_bytes();
    for v in mel.values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mel(bytes: &[u8]) -> Result<MelSpectrogram> {
    let bad = |d: &str| Error::format("DPN-MEL", d.to_string());
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8"))?;
    let fields: Vec<&str> = header.split_ascii_whitespace().collect();
    if fields.len() != 7 || fields[0] != MAGIC {
        return Err(bad("expected `DPN-MEL v1 n_mels n_frames sr n_fft hop`"));
    }
    if fields[1] != "v1" {
        return Err(bad(&format!("unsupported version {}", fields[1])));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .parse::<usize>()
            .map_err(|_| bad(&format!("field {i} `{}` is not an integer", fields[i])))
    };
    let (n_mels, n_frames, sr, n_fft, hop) = (num(2)?, num(3)?, num(4)?, num(5)?, num(6)?);
    let body = &bytes[nl + 1..];
    let count = n_mels
        .checked_mul(n_frames)
        .ok_or_else(|| bad("dimensions overflow"))?;
    if body.len() != count * 8 {
        return Err(bad(&format!("expected {} value bytes, found {}", count * 8, body.len())));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(MelSpectrogram {
        values: Tensor::new(&[n_mels, n_frames], values)?,
        sample_rate: u32::try_from(sr).map_err(|_| bad("sample rate out of range"))?,
        n_fft,
        hop,
        n_mels,
    })
}

pub fn write_mel_dump(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    fs::write(path, encode_mel(mel)).map_err(|e| Error::io(path, e))
}

pub fn read_mel_dump(path: &Path) -> Result<MelSpectrogram> {
    decode_mel(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Binary 8-bit grayscale PGM, one row per mel band (lowest band at the
/// bottom) and one column per frame. Values are scaled linearly between the
/// minimum and maximum; a constant spectrogram renders mid-gray.
pub fn encode_pgm(mel: &MelSpectrogram) -> Vec<u8> {
    let (h, w) = (mel.n_mels, mel.n_frames());
    let d = mel.values.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for row in (0..h).rev() {
        for t in 0..w {
            let v = d[row * w + t];
            let px = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() } else { 128.0 };
            out.push(px as u8);
        }
    }
    out
}

pub fn write_pgm(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(mel)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MelSpectrogram {
        MelSpectrogram {
            values: Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.3).sin() * 7.1 - 1e-300).collect()).unwrap(),
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 256,
            n_mels: 3,
        }
    }

    #[test]
    fn dump_roundtrip_is_exact() {
        let m = sample();
        let back = decode_mel(&encode_mel(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_dump_rejected() {
        let mut b = encode_mel(&sample());
        b.pop();
        assert!(decode_mel(&b).is_err());
        assert!(decode_mel(b"DPN-MEL v2 1 1 1 1 1\n\0\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn pgm_dimensions_and_uniform_silence() {
        let m = sample();
        let p = encode_pgm(&m);
        assert!(p.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(p.len(), b"P5\n4 3\n255\n".len() + 12);

        let flat = MelSpectrogram {
            values: Tensor::full(&[3, 4], -23.0),
            ..m
        };
        let p = encode_pgm(&flat);
        let px = &p[p.len() - 12..];
        assert!(px.iter().all(|&v| v == px[0]));
    }
}

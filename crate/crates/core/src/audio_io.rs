//! WAV files and the flat binary variance-field format.
//!
//! Variance files are little-endian: the magic `PSM1`, then `u32` source
//! count, frequency count and frame count, then one `f32` per entry in
//! (source, frequency, frame) row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use hound::{SampleFormat as HoundFormat, WavReader, WavSpec as HoundSpec, WavWriter};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::TimeSignal;
use crate::error::{Error, Result};
use crate::model::{VarianceField, VarianceKind};

pub const VARIANCE_MAGIC: &[u8; 4] = b"PSM1";
/// Read-time lower bound on stored variances.
pub const VARIANCE_READ_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavSpec {
    pub sample_rate_hz: u32,
    pub channel_count: u16,
    pub sample_format: SampleFormat,
}

impl WavSpec {
    pub fn float32(signal: &TimeSignal) -> Self {
        WavSpec {
            sample_rate_hz: signal.sample_rate_hz(),
            channel_count: signal.channel_count() as u16,
            sample_format: SampleFormat::Float32,
        }
    }
}

fn wav_err(path: &Path, source: hound::Error) -> Error {
    match source {
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::Unsupported => Error::UnsupportedFormat(format!("{}: unsupported WAV codec", path.display())),
        other => Error::Wav { path: path.to_path_buf(), source: other },
    }
}

/// Reads a PCM16 or IEEE float32 WAV file into [-1, 1] samples.
pub fn read_wav(path: impl AsRef<Path>) -> Result<TimeSignal> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Malformed { path: path.into(), reason: "zero channels".into() });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (HoundFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (HoundFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: {bits}-bit {fmt:?} samples (format tag {})",
                path.display(),
                if fmt == HoundFormat::Int { 1 } else { 3 }
            )))
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(Error::Malformed { path: path.into(), reason: "truncated sample frame".into() });
    }
    let frames = interleaved.len() / channels;
    let mut out = vec![Vec::with_capacity(frames); channels];
    for (k, v) in interleaved.into_iter().enumerate() {
        out[k % channels].push(v);
    }
    TimeSignal::new(out, spec.sample_rate)
}

/// Writes a WAV file, clipping to [-1, 1]. Returns the number of clipped samples.
pub fn write_wav(signal: &TimeSignal, spec: WavSpec, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    if spec.channel_count as usize != signal.channel_count() {
        return Err(Error::Shape(format!(
            "signal has {} channels, WAV spec declares {}",
            signal.channel_count(),
            spec.channel_count
        )));
    }
    let hspec = HoundSpec {
        channels: spec.channel_count,
        sample_rate: spec.sample_rate_hz,
        bits_per_sample: match spec.sample_format {
            SampleFormat::Pcm16 => 16,
            SampleFormat::Float32 => 32,
        },
        sample_format: match spec.sample_format {
            SampleFormat::Pcm16 => HoundFormat::Int,
            SampleFormat::Float32 => HoundFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, hspec).map_err(|e| wav_err(path, e))?;
    let mut clipped = 0;
    for t in 0..signal.len() {
        for m in 0..signal.channel_count() {
            let x = signal.channel(m)[t];
            let y = x.clamp(-1.0, 1.0);
            if y != x {
                clipped += 1;
            }
            match spec.sample_format {
                SampleFormat::Pcm16 => {
                    let q = (y * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)
                }
                SampleFormat::Float32 => writer.write_sample(y as f32),
            }
            .map_err(|e| wav_err(path, e))?;
        }
    }
    writer.finalize().map_err(|e| wav_err(path, e))?;
    if clipped > 0 {
        log::warn!("{}: clipped {clipped} samples", path.display());
    }
    Ok(clipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarianceFileHeader {
    pub n_sources: u32,
    pub n_freq: u32,
    pub n_frames: u32,
}

impl VarianceFileHeader {
    pub const LEN: usize = 16;

    pub fn encode(&self) -> [u8; Self::LEN] {
        let mut out = [0u8; Self::LEN];
        out[..4].copy_from_slice(VARIANCE_MAGIC);
        out[4..8].copy_from_slice(&self.n_sources.to_le_bytes());
        out[8..12].copy_from_slice(&self.n_freq.to_le_bytes());
        out[12..16].copy_from_slice(&self.n_frames.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < Self::LEN {
            return Err(format!("header needs {} bytes, file has {}", Self::LEN, bytes.len()));
        }
        if &bytes[..4] != VARIANCE_MAGIC {
            return Err(format!("bad magic {:?}", &bytes[..4]));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap());
        let header = VarianceFileHeader { n_sources: word(4), n_freq: word(8), n_frames: word(12) };
        if header.n_sources == 0 || header.n_freq == 0 || header.n_frames == 0 {
            return Err(format!("zero dimension in header {header:?}"));
        }
        Ok(header)
    }

    fn payload_len(&self) -> usize {
        self.n_sources as usize * self.n_freq as usize * self.n_frames as usize * 4
    }
}

pub fn read_variance_file(path: impl AsRef<Path>) -> Result<Vec<VarianceField>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::Malformed { path: path.into(), reason };
    let header = VarianceFileHeader::decode(&bytes).map_err(malformed)?;
    let payload = &bytes[VarianceFileHeader::LEN..];
    if payload.len() != header.payload_len() {
        return Err(malformed(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            header.payload_len()
        )));
    }
    let (i, j) = (header.n_freq as usize, header.n_frames as usize);
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    (0..header.n_sources)
        .map(|_| {
            let data: Vec<f64> = values.by_ref().take(i * j).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(malformed("non-finite variance".into()));
            }
            let field = Array2::from_shape_vec((i, j), data)
                .expect("payload length checked")
                .mapv(|r| r.max(VARIANCE_READ_FLOOR));
            Ok(VarianceField { values: field, kind: VarianceKind::Estimator })
        })
        .collect()
}

pub fn write_variance_file(fields: &[Array2<f64>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("no variance fields to write".into()))?;
    let (i, j) = first.dim();
    if fields.iter().any(|f| f.dim() != (i, j)) {
        return Err(Error::Shape("variance fields differ in shape".into()));
    }
    let header = VarianceFileHeader { n_sources: fields.len() as u32, n_freq: i as u32, n_frames: j as u32 };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        w.write_all(&header.encode())?;
        for f in fields {
            for &v in f.iter() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write_raw(dir: &Path, name: &str, header: &[u8], payload: &[f32]) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut bytes = header.to_vec();
        for v in payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn float_wav_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<f64> = (0..100).map(|k| ((k as f32 * 0.37).sin() * 0.9) as f64).collect();
        let sig = TimeSignal::new(vec![samples.clone(), samples.iter().map(|v| -v / 2.0).collect()], 8000).unwrap();
        let path = dir.path().join("a.wav");
        let clipped = write_wav(&sig, WavSpec::float32(&sig), &path).unwrap();
        assert_eq!(clipped, 0);
        let back = read_wav(&path).unwrap();
        assert_eq!(back, sig);

        let reader = hound::WavReader::open(&path).unwrap();
        assert_eq!(reader.spec().channels, 2);
        assert_eq!(reader.spec().sample_rate, 8000);
        assert_eq!(reader.spec().bits_per_sample, 32);
        assert_eq!(reader.spec().sample_format, HoundFormat::Float);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<f64> = (0..=200).map(|k| -1.0 + k as f64 / 100.0).collect();
        let sig = TimeSignal::mono(samples.clone(), 16000).unwrap();
        let spec = WavSpec { sample_rate_hz: 16000, channel_count: 1, sample_format: SampleFormat::Pcm16 };
        let path = dir.path().join("b.wav");
        write_wav(&sig, spec, &path).unwrap();
        let back = read_wav(&path).unwrap();
        for (a, b) in back.channel(0).iter().zip(&samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn clipping_is_counted() {
        let dir = tempfile::tempdir().unwrap();
        let sig = TimeSignal::mono(vec![0.5, 1.5, -2.0, 1.0], 8000).unwrap();
        let n = write_wav(&sig, WavSpec::float32(&sig), dir.path().join("c.wav")).unwrap();
        assert_eq!(n, 2);
        let back = read_wav(dir.path().join("c.wav")).unwrap();
        assert_eq!(back.channel(0), &[0.5, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn bad_wav_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.wav");
        std::fs::write(&empty, b"").unwrap();
        assert!(read_wav(&empty).is_err());
        assert!(matches!(read_wav(dir.path().join("missing.wav")), Err(Error::Io { .. })));

        let sig = TimeSignal::mono(vec![0.1; 64], 8000).unwrap();
        let p = dir.path().join("t.wav");
        write_wav(&sig, WavSpec::float32(&sig), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(read_wav(&p).is_err());

        let spec = WavSpec { sample_rate_hz: 8000, channel_count: 2, sample_format: SampleFormat::Float32 };
        assert!(matches!(write_wav(&sig, spec, dir.path().join("x.wav")), Err(Error::Shape(_))));
        assert!(write_wav(&sig, WavSpec::float32(&sig), dir.path().join("nope/x.wav")).is_err());
    }

    #[test]
    fn unsupported_sample_format_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i32.wav");
        let spec = HoundSpec { channels: 1, sample_rate: 8000, bits_per_sample: 32, sample_format: HoundFormat::Int };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        let err = read_wav(&p).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)));
        assert!(err.to_string().contains("format tag 1"));
    }

    #[test]
    fn variance_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let h = VarianceFileHeader { n_sources: 1, n_freq: 2, n_frames: 2 }.encode();
        let p = write_raw(dir.path(), "v.psm1", &h, &[1.0, 2.0, 3.0, 4.0]);
        let fields = read_variance_file(&p).unwrap();
        assert_eq!(fields.len(), 1);
        assert_eq!(fields[0].values, array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn variance_file_floors_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let h = VarianceFileHeader { n_sources: 1, n_freq: 1, n_frames: 2 }.encode();
        let p = write_raw(dir.path(), "z.psm1", &h, &[0.0, 2.0]);
        assert_eq!(read_variance_file(&p).unwrap()[0].values, array![[1e-12, 2.0]]);
    }

    #[test]
    fn variance_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let h = VarianceFileHeader { n_sources: 1, n_freq: 2, n_frames: 2 }.encode();
        let short = write_raw(dir.path(), "s.psm1", &h, &[1.0, 2.0, 3.0]);
        assert!(matches!(read_variance_file(&short), Err(Error::Malformed { .. })));
        let mut bad = h;
        bad[0] = b'X';
        let p = write_raw(dir.path(), "m.psm1", &bad, &[1.0; 4]);
        assert!(matches!(read_variance_file(&p), Err(Error::Malformed { .. })));
        let zero = VarianceFileHeader { n_sources: 0, n_freq: 2, n_frames: 2 }.encode();
        let p = write_raw(dir.path(), "0.psm1", &zero, &[]);
        assert!(read_variance_file(&p).is_err());
    }

    #[test]
    fn variance_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = array![[0.5, 2.0, 8.0], [1.0, 0.25, 3.0]];
        let b = a.mapv(|x| x * 3.0);
        let p = dir.path().join("rt.psm1");
        write_variance_file(&[a.clone(), b.clone()], &p).unwrap();
        let back = read_variance_file(&p).unwrap();
        assert_eq!(back[0].values, a);
        assert_eq!(back[1].values, b);
    }
}

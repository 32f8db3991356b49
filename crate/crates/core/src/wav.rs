//! RIFF/WAV reading and writing at the `f64` boundary.
//!
//! Accepts 16-bit integer PCM and 32-bit IEEE float. Float data round-trips
//! bit-exactly through `f64`; 16-bit data is scaled by 1/32768.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Sample encoding used when writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavEncoding {
    #[default]
    Float32,
    Pcm16,
}

fn map_hound(err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e)
            if e.kind() == std::io::ErrorKind::UnexpectedEof || e.to_string().contains("enough bytes") =>
        {
            Error::Wav("unexpected end of WAV data".into())
        }
        hound::Error::IoError(e) => Error::Io(e),
        hound::Error::FormatError(msg) => Error::Wav(format!("malformed WAV header: {msg}")),
        hound::Error::Unsupported => Error::Wav("unsupported WAV codec".into()),
        hound::Error::UnfinishedSample => Error::Wav("unexpected end of WAV data".into()),
        other => Error::Wav(format!("invalid WAV file: {other}")),
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let file = File::open(path.as_ref())?;
    let available = file.metadata()?.len();
    read_wav_from(BufReader::new(file), available)
}

/// Decodes a complete WAV file held in memory.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    read_wav_from(Cursor::new(bytes), bytes.len() as u64)
}

fn read_wav_from<R: Read>(reader: R, available_bytes: u64) -> Result<Waveform> {
    let mut reader = WavReader::new(reader).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(Error::Wav("malformed WAV header: zero channels".into()));
    }
    if spec.sample_rate == 0 {
        return Err(Error::Wav("malformed WAV header: zero sample rate".into()));
    }
    let channels = usize::from(spec.channels);
    let declared = reader.len() as usize;
    let bytes_per_sample = usize::from(spec.bits_per_sample).div_ceil(8).max(1);
    // never trust the declared length for allocation
    let capacity = declared.min(available_bytes as usize / bytes_per_sample);
    let mut interleaved = Vec::with_capacity(capacity);

    match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => {
            for s in reader.samples::<f32>() {
                interleaved.push(f64::from(s.map_err(map_hound)?));
            }
        }
        (SampleFormat::Int, 16) => {
            for s in reader.samples::<i16>() {
                interleaved.push(f64::from(s.map_err(map_hound)?) / 32768.0);
            }
        }
        (format, bits) => {
            return Err(Error::Wav(format!(
                "unsupported WAV codec: {bits}-bit {}",
                if format == SampleFormat::Float { "float" } else { "integer" }
            )))
        }
    }
    if interleaved.len() % channels != 0 {
        return Err(Error::Wav("unexpected end of WAV data".into()));
    }

    let frames = interleaved.len() / channels;
    let mut out = vec![Vec::with_capacity(frames); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (ch, &v) in out.iter_mut().zip(frame) {
            ch.push(v);
        }
    }
    Waveform::new(out, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform, encoding: WavEncoding) -> Result<()> {
    let file = BufWriter::new(File::create(path.as_ref())?);
    write_wav_to(file, wave, encoding)
}

/// Encodes a waveform into an in-memory WAV file.
pub fn encode_wav(wave: &Waveform, encoding: WavEncoding) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    write_wav_to(&mut buf, wave, encoding)?;
    Ok(buf.into_inner())
}

fn write_wav_to<W: Write + Seek>(writer: W, wave: &Waveform, encoding: WavEncoding) -> Result<()> {
    let channels = u16::try_from(wave.num_channels())
        .map_err(|_| Error::Wav(format!("{} channels do not fit a WAV header", wave.num_channels())))?;
    let spec = WavSpec {
        channels,
        sample_rate: wave.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Float32 => 32,
            WavEncoding::Pcm16 => 16,
        },
        sample_format: match encoding {
            WavEncoding::Float32 => SampleFormat::Float,
            WavEncoding::Pcm16 => SampleFormat::Int,
        },
    };
    let mut out = WavWriter::new(writer, spec).map_err(map_hound)?;
    for n in 0..wave.len() {
        for ch in wave.channels() {
            match encoding {
                WavEncoding::Float32 => out.write_sample(ch[n] as f32),
                WavEncoding::Pcm16 => {
                    out.write_sample((ch[n] * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
                }
            }
            .map_err(map_hound)?;
        }
    }
    out.finalize().map_err(map_hound)
}

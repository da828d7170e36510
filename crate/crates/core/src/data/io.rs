//! WAV, blendshape CSV and mask file formats.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::channels::CHANNEL_NAMES;
use super::{AudioClip, BlendshapeSequence, ClipLabels, N_BLENDSHAPES, SAMPLE_RATE};
use crate::error::{Error, Result};

const PCM_SCALE: f64 = i16::MAX as f64;

/// Writes a 16 kHz mono PCM16 WAV. Samples are clipped to `[-1, 1]`.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in clip.samples() {
        writer.write_sample((s.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Reads a 16 kHz mono PCM16 WAV.
pub fn read_wav(path: &Path, labels: ClipLabels) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "expected mono PCM16, found {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected {SAMPLE_RATE} Hz, found {} Hz", spec.sample_rate),
        });
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    AudioClip::new(samples, spec.sample_rate, labels)
}

/// Writes `# fps=N`, a header of channel names, then one row per frame.
pub fn write_blendshape_csv(path: &Path, seq: &BlendshapeSequence) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# fps={}", seq.fps()).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(CHANNEL_NAMES)?;
    for row in seq.coeffs().rows() {
        writer.write_record(row.iter().map(|v| v.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_blendshape_csv(path: &Path) -> Result<BlendshapeSequence> {
    let format_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut fps = None;
    for line in text.lines().filter(|l| l.starts_with('#')) {
        if let Some(v) = line.trim_start_matches('#').trim().strip_prefix("fps=") {
            fps = Some(
                v.trim()
                    .parse::<u32>()
                    .map_err(|e| format_err(format!("bad fps comment: {e}")))?,
            );
        }
    }
    let fps = fps.ok_or_else(|| format_err("missing `# fps=` line".into()))?;

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.len() != N_BLENDSHAPES {
        return Err(format_err(format!(
            "header has {} columns, expected {N_BLENDSHAPES}",
            header.len()
        )));
    }
    let mut values = Vec::new();
    let mut frames = 0;
    for record in reader.records() {
        let record = record?;
        for field in record.iter() {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| format_err(format!("row {frames}: {e}")))?,
            );
        }
        frames += 1;
    }
    let coeffs = Array2::from_shape_vec((frames, N_BLENDSHAPES), values).map_err(|e| format_err(e.to_string()))?;
    BlendshapeSequence::with_fps(coeffs, fps)
}

/// One index per line.
pub fn write_mask(path: &Path, indices: &[usize]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for i in indices {
        writeln!(out, "{i}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a mask file; blank lines and `#` comments are skipped.
pub fn read_mask(path: &Path) -> Result<Vec<usize>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(line.parse::<usize>().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl AudioSignal {
    pub fn new(samples: Vec<f32>) -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            samples,
        }
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

    /// Rounds every sample onto the 16-bit PCM grid so a WAV round trip is
    /// lossless.
    pub fn quantize_pcm16(mut self) -> Self {
        for s in &mut self.samples {
            *s = pcm16_to_f32(f32_to_pcm16(*s));
        }
        self
    }
}

pub fn f32_to_pcm16(v: f32) -> i16 {
    (v.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn pcm16_to_f32(v: i16) -> f32 {
    v as f32 / 32767.0
}

pub fn write_wav(path: &Path, audio: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for s in &audio.samples {
        w.write_sample(f32_to_pcm16(*s)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let r = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            msg: format!("expected 16-bit PCM mono, got {spec:?}"),
        });
    }
    let samples = r
        .into_samples::<i16>()
        .map(|s| s.map(pcm16_to_f32))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Ok(AudioSignal {
        sample_rate: spec.sample_rate,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_is_exact_on_pcm_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let a = AudioSignal::new((0..1000).map(|i| (i as f32 * 0.01).sin() * 0.7).collect()).quantize_pcm16();
        write_wav(&p, &a).unwrap();
        assert_eq!(read_wav(&p).unwrap(), a);
    }

    #[test]
    fn missing_wav_names_path() {
        let err = read_wav(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.wav"));
    }
}

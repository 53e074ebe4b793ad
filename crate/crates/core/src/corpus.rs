//! Deterministic synthetic speech: every text token becomes a 160 ms
//! harmonic tone whose fundamental encodes the token and whose harmonic
//! profile encodes the speaker.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, AudioSignal, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Size of the toy text vocabulary.
pub const N_TEXT_TOKENS: usize = 64;
pub const MAX_SPEAKERS: u8 = 5;
/// 160 ms per token: 8 feature frames at 50 Hz, 2 token frames at 12.5 Hz.
pub const TOKEN_SAMPLES: usize = 2560;
pub const TOKEN_SECONDS: f64 = 0.16;

const BASE_HZ: f64 = 200.0;
const STEP_HZ: f64 = 35.0;
const PEAK: f64 = 0.8;

/// `(harmonic 2, harmonic 3)` amplitude relative to the fundamental.
const SPEAKER_HARMONICS: [(f64, f64); MAX_SPEAKERS as usize] = [(0.15, 0.05), (0.45, 0.10), (0.10, 0.45), (0.60, 0.40), (0.30, 0.25)];

pub fn token_hz(token: u16) -> f64 {
    BASE_HZ + STEP_HZ * token as f64
}

pub fn speaker_harmonics(speaker: u8) -> (f64, f64) {
    SPEAKER_HARMONICS[(speaker - 1) as usize]
}

/// Amplitudes of harmonics 1..=3 for a speaker.
pub fn speaker_amplitudes(speaker: u8) -> [f64; 3] {
    let (r2, r3) = speaker_harmonics(speaker);
    let a1 = PEAK / (1.0 + r2 + r3);
    [a1, a1 * r2, a1 * r3]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub speaker_id: u8,
    pub text: Vec<u16>,
    pub audio: AudioSignal,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueSample {
    pub turns: Vec<SynthUtterance>,
    pub n_speakers: u8,
}

/// Renders `text` in `speaker`'s voice. Phases are referenced to the first
/// sample of the utterance, so a token's tone depends only on its position.
pub fn render(text: &[u16], speaker: u8) -> AudioSignal {
    assert!((1..=MAX_SPEAKERS).contains(&speaker), "speaker {speaker} out of range");
    let amps = speaker_amplitudes(speaker);
    let sr = SAMPLE_RATE as f64;
    let mut samples = Vec::with_capacity(text.len() * TOKEN_SAMPLES);
    for (i, &tok) in text.iter().enumerate() {
        assert!((tok as usize) < N_TEXT_TOKENS, "token {tok} out of range");
        let f = token_hz(tok);
        for j in 0..TOKEN_SAMPLES {
            let n = (i * TOKEN_SAMPLES + j) as f64;
            let v: f64 = amps
                .iter()
                .enumerate()
                .map(|(h, a)| a * (2.0 * PI * f * (h + 1) as f64 * n / sr).sin())
                .sum();
            samples.push(v as f32);
        }
    }
    AudioSignal::new(samples).quantize_pcm16()
}

pub fn utterance(id: String, text: Vec<u16>, speaker: u8) -> SynthUtterance {
    let audio = render(&text, speaker);
    SynthUtterance {
        id,
        speaker_id: speaker,
        duration_s: text.len() as f64 * TOKEN_SECONDS,
        text,
        audio,
    }
}

fn random_text<R: Rng>(rng: &mut R, max_tokens: usize) -> Vec<u16> {
    let len = rng.random_range(1..=max_tokens);
    (0..len).map(|_| rng.random_range(0..N_TEXT_TOKENS as u16)).collect()
}

pub fn gen_monologue(seed: u64, n: usize, max_tokens: usize) -> Vec<SynthUtterance> {
    assert!(n >= 1 && max_tokens >= 1, "n and max_tokens must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let speaker = rng.random_range(1..=MAX_SPEAKERS);
            let text = random_text(&mut rng, max_tokens);
            utterance(format!("m{i:05}"), text, speaker)
        })
        .collect()
}

/// Dialogues whose turn count is uniform in `turns` and whose speaker set
/// is exactly `{1..=n_speakers}`.
pub fn gen_dialogue(seed: u64, n: usize, n_speakers: u8, turns: (usize, usize), max_tokens: usize) -> Result<Vec<DialogueSample>> {
    if !(2..=MAX_SPEAKERS).contains(&n_speakers) {
        return Err(Error::invalid(format!("n_speakers must be in 2..=5, got {n_speakers}")));
    }
    let (lo, hi) = turns;
    if lo > hi || lo < n_speakers as usize {
        return Err(Error::invalid(format!(
            "turn range ({lo}, {hi}) must satisfy n_speakers ({n_speakers}) <= min <= max"
        )));
    }
    if max_tokens == 0 {
        return Err(Error::invalid("max_tokens must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for d in 0..n {
        let count = rng.random_range(lo..=hi);
        let speakers = loop {
            let s: Vec<u8> = (0..count).map(|_| rng.random_range(1..=n_speakers)).collect();
            if (1..=n_speakers).all(|k| s.contains(&k)) {
                break s;
            }
        };
        let turns = speakers
            .iter()
            .enumerate()
            .map(|(t, &spk)| {
                let text = random_text(&mut rng, max_tokens);
                utterance(format!("d{d:05}_t{t:02}"), text, spk)
            })
            .collect();
        out.push(DialogueSample { turns, n_speakers });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    format: String,
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    wav_path: String,
    speaker_id: u8,
    text_token_ids: Vec<u16>,
    duration_s: f64,
}

const MANIFEST_FORMAT: &str = "duotts-manifest";

/// Writes one JSON line per utterance after a header line. WAVs go to
/// `wav/<id>.wav` next to the manifest and are referenced relatively.
pub fn write_manifest(samples: &[SynthUtterance], path: &Path) -> Result<()> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: 1,
    };
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serialises")).map_err(io)?;
    for s in samples {
        let rel = format!("wav/{}.wav", s.id);
        write_wav(&dir.join(&rel), &s.audio)?;
        let rec = ManifestRecord {
            id: s.id.clone(),
            wav_path: rel,
            speaker_id: s.speaker_id,
            text_token_ids: s.text.clone(),
            duration_s: s.duration_s,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serialises")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SynthUtterance>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let bad = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            let h: ManifestHeader = serde_json::from_str(&line).map_err(|e| bad(lineno, format!("bad header: {e}")))?;
            if h.format != MANIFEST_FORMAT || h.version != 1 {
                return Err(bad(lineno, format!("unsupported manifest {} v{}", h.format, h.version)));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| bad(lineno, e.to_string()))?;
        if !(1..=MAX_SPEAKERS).contains(&rec.speaker_id) {
            return Err(bad(lineno, format!("speaker_id {} out of range", rec.speaker_id)));
        }
        if let Some(t) = rec.text_token_ids.iter().find(|t| **t as usize >= N_TEXT_TOKENS) {
            return Err(bad(lineno, format!("text token {t} out of range")));
        }
        let wav: PathBuf = dir.join(&rec.wav_path);
        if !wav.exists() {
            return Err(Error::Wav {
                path: wav,
                msg: "file not found".into(),
            });
        }
        out.push(SynthUtterance {
            id: rec.id,
            speaker_id: rec.speaker_id,
            text: rec.text_token_ids,
            audio: read_wav(&wav)?,
            duration_s: rec.duration_s,
        });
    }
    Ok(out)
}

/// Dialogue turns are stored as utterances with ids `d<dialogue>_t<turn>`.
pub fn write_dialogue_manifest(samples: &[DialogueSample], path: &Path) -> Result<()> {
    let flat: Vec<SynthUtterance> = samples.iter().flat_map(|d| d.turns.iter().cloned()).collect();
    write_manifest(&flat, path)
}

pub fn read_dialogue_manifest(path: &Path) -> Result<Vec<DialogueSample>> {
    let mut groups: BTreeMap<String, Vec<SynthUtterance>> = BTreeMap::new();
    for u in read_manifest(path)? {
        let key = u
            .id
            .split_once("_t")
            .map(|(d, _)| d.to_string())
            .ok_or_else(|| Error::invalid(format!("utterance id {} is not a dialogue turn id", u.id)))?;
        groups.entry(key).or_default().push(u);
    }
    Ok(groups
        .into_values()
        .map(|turns| {
            let n_speakers = turns.iter().map(|t| t.speaker_id).max().unwrap_or(0);
            DialogueSample { turns, n_speakers }
        })
        .collect())
}

//! Matched-filter decoding of synthetic speech: the intelligibility and
//! speaker-identity stand-ins used by every end-to-end check.

use std::f64::consts::PI;

use crate::audio::{AudioSignal, SAMPLE_RATE};
use crate::corpus::{speaker_harmonics, token_hz, MAX_SPEAKERS, N_TEXT_TOKENS, TOKEN_SAMPLES};

/// Amplitude of the `hz` component in `chunk` (phase-invariant).
fn tone_amplitude(chunk: &[f32], hz: f64) -> f64 {
    let w = 2.0 * PI * hz / SAMPLE_RATE as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (j, x) in chunk.iter().enumerate() {
        let (s, c) = (w * j as f64).sin_cos();
        re += *x as f64 * c;
        im += *x as f64 * s;
    }
    2.0 * (re * re + im * im).sqrt() / chunk.len() as f64
}

fn chunks(audio: &AudioSignal) -> impl Iterator<Item = &[f32]> {
    let n = (audio.len() + TOKEN_SAMPLES / 2) / TOKEN_SAMPLES;
    (0..n).map(move |i| {
        let end = ((i + 1) * TOKEN_SAMPLES).min(audio.len());
        &audio.samples[i * TOKEN_SAMPLES..end]
    })
}

fn best_token(chunk: &[f32]) -> u16 {
    (0..N_TEXT_TOKENS as u16)
        .map(|t| (t, tone_amplitude(chunk, token_hz(t))))
        .fold((0, f64::MIN), |best, cur| if cur.1 > best.1 { cur } else { best })
        .0
}

/// One token per 160 ms chunk: the token whose fundamental carries the
/// most energy. A trailing partial chunk counts if it is at least half long.
pub fn decode_text(audio: &AudioSignal) -> Vec<u16> {
    chunks(audio).map(best_token).collect()
}

/// Nearest speaker by the mean harmonic-2/3 amplitude ratios over chunks.
pub fn identify_speaker(audio: &AudioSignal) -> Option<u8> {
    let (mut r2, mut r3, mut n) = (0.0, 0.0, 0usize);
    for chunk in chunks(audio) {
        let f = token_hz(best_token(chunk));
        let a1 = tone_amplitude(chunk, f);
        if a1 < 1e-3 {
            continue;
        }
        r2 += tone_amplitude(chunk, 2.0 * f) / a1;
        r3 += tone_amplitude(chunk, 3.0 * f) / a1;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let (r2, r3) = (r2 / n as f64, r3 / n as f64);
    (1..=MAX_SPEAKERS).min_by(|a, b| {
        let d = |s: u8| {
            let (h2, h3) = speaker_harmonics(s);
            (h2 - r2).powi(2) + (h3 - r3).powi(2)
        };
        d(*a).total_cmp(&d(*b))
    })
}

pub fn edit_distance(a: &[u16], b: &[u16]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - edit_distance / len(reference)`, floored at 0.
pub fn token_accuracy(decoded: &[u16], reference: &[u16]) -> f64 {
    if reference.is_empty() {
        return if decoded.is_empty() { 1.0 } else { 0.0 };
    }
    (1.0 - edit_distance(decoded, reference) as f64 / reference.len() as f64).max(0.0)
}

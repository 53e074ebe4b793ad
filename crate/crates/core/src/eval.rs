//! Evaluation helpers: tokenizer round trips and the linear probe on
//! layer-1 code vectors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audio::AudioSignal;
use crate::corpus::{SynthUtterance, N_TEXT_TOKENS};
use crate::error::{Error, Result};
use crate::oracle::{decode_text, identify_speaker, token_accuracy};
use crate::rvq::TokenGrid;
use crate::tokenizer::{recon_error, TokenizerModel};

/// Token frames per text token in the synthetic corpus (160 ms / 80 ms).
pub const FRAMES_PER_TOKEN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundtripReport {
    pub utterances: usize,
    pub recon_error: f64,
    pub token_accuracy: f64,
    pub speaker_accuracy: f64,
}

/// decode(encode(x)) against the matched-filter oracle.
pub fn roundtrip(m: &TokenizerModel, utts: &[SynthUtterance]) -> Result<RoundtripReport> {
    if utts.is_empty() {
        return Err(Error::invalid("no utterances to evaluate"));
    }
    let (mut err, mut acc, mut spk) = (0.0, 0.0, 0usize);
    for u in utts {
        let g = m.encode(&u.audio)?;
        let y = m.decode(&g, u.audio.len())?;
        err += recon_error(m, &u.audio)?;
        acc += token_accuracy(&decode_text(&y), &u.text);
        spk += (identify_speaker(&y) == Some(u.speaker_id)) as usize;
    }
    let n = utts.len() as f64;
    Ok(RoundtripReport {
        utterances: utts.len(),
        recon_error: err / n,
        token_accuracy: acc / n,
        speaker_accuracy: spk as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Intelligibility {
    pub token_accuracy: f64,
    pub speaker_correct: bool,
}

pub fn intelligibility(audio: &AudioSignal, text: &[u16], speaker: u8) -> Intelligibility {
    Intelligibility {
        token_accuracy: token_accuracy(&decode_text(audio), text),
        speaker_correct: identify_speaker(audio) == Some(speaker),
    }
}

/// Labelled feature rows for a probe.
#[derive(Debug, Clone, Default)]
pub struct ProbeSet {
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// One row per token frame inside the text: the layer-1 code vector,
/// labelled with the text token sounding at that frame.
pub fn code_probe_set(m: &TokenizerModel, utts: &[SynthUtterance]) -> Result<ProbeSet> {
    let dim = m.codebooks.vector(0, 0).len();
    let mut set = ProbeSet {
        dim,
        ..Default::default()
    };
    for u in utts {
        let g: TokenGrid = m.encode(&u.audio)?;
        for f in 0..g.n_frames.min(u.text.len() * FRAMES_PER_TOKEN) {
            set.features.extend_from_slice(m.codebooks.vector(0, g.get(f, 0) as usize));
            set.labels.push(u.text[f / FRAMES_PER_TOKEN] as usize);
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.5,
            seed: 0,
        }
    }
}

/// Softmax regression on standardized features, fitted by SGD on `train`;
/// returns accuracy on `test`.
pub fn linear_probe(train: &ProbeSet, test: &ProbeSet, cfg: &ProbeConfig) -> Result<f64> {
    if train.is_empty() || test.is_empty() || train.dim != test.dim {
        return Err(Error::invalid("probe sets must be nonempty with equal dimension"));
    }
    let (d, c) = (train.dim, N_TEXT_TOKENS);
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for i in 0..train.len() {
        for (m, x) in mean.iter_mut().zip(train.row(i)) {
            *m += *x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for i in 0..train.len() {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(train.row(i)) {
            *v += (*x as f64 - m).powi(2);
        }
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v / train.len() as f64).sqrt().max(1e-8)).collect();
    let norm = |x: &[f32]| -> Vec<f64> { x.iter().zip(&mean).zip(&inv).map(|((x, m), s)| (*x as f64 - m) * s).collect() };
    let logits = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|k| b[k] + w[k * d..(k + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    let mut w = vec![0.0f64; c * d];
    let mut b = vec![0.0f64; c];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let xs: Vec<Vec<f64>> = (0..train.len()).map(|i| norm(train.row(i))).collect();
    for e in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr / (1.0 + e as f64 * 0.05);
        for &i in &order {
            let x = &xs[i];
            let mut p = logits(&w, &b, x);
            let mx = p.iter().copied().fold(f64::MIN, f64::max);
            let z: f64 = p.iter_mut().map(|v| {
                *v = (*v - mx).exp();
                *v
            }).sum();
            for (k, pk) in p.iter().enumerate() {
                let gk = pk / z - (k == train.labels[i]) as u8 as f64;
                b[k] -= lr * gk;
                for (wj, xj) in w[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *wj -= lr * gk * xj;
                }
            }
        }
    }
    let hits = (0..test.len())
        .filter(|&i| {
            let l = logits(&w, &b, &norm(test.row(i)));
            let best = (0..c).fold(0, |a, k| if l[k] > l[a] { k } else { a });
            best == test.labels[i]
        })
        .count();
    Ok(hits as f64 / test.len() as f64)
}

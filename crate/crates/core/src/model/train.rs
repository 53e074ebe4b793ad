//! The three-stage curriculum.

use std::collections::BTreeSet;

use duotts_nn::{Adam, Graph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_graph, DualModel, LossBreakdown, LossWeights, Subsample};
use crate::error::{Error, Result};
use crate::sequence::{flatten, InterleavedSequence, TokenKind};
use crate::tokenizer::Batches;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Pretrain,
    Posttrain,
    Sft,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Posttrain => "posttrain",
            Stage::Sft => "sft",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub subsample: Subsample,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            subsample: Subsample::Segment,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub stage: Stage,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

fn speakers(s: &InterleavedSequence) -> BTreeSet<u8> {
    s.segments.iter().map(|x| x.speaker).collect()
}

/// Pretraining takes single-segment monologues, post-training takes
/// dialogues with 2 to 5 speakers, and fine-tuning takes sequences that all
/// share one speaker set.
pub fn check_stage(stage: Stage, data: &[InterleavedSequence]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid(format!("{} needs at least one sequence", stage.name())));
    }
    let mismatch = |i: usize, why: &str| Err(Error::invalid(format!("{}: sequence {i} {why}", stage.name())));
    for (i, s) in data.iter().enumerate() {
        if s.segments.iter().any(|x| x.audio.is_none()) {
            return mismatch(i, "has a segment without audio");
        }
        match stage {
            Stage::Pretrain if s.segments.len() != 1 => return mismatch(i, "is not a monologue"),
            Stage::Posttrain if !(2..=5).contains(&speakers(s).len()) => return mismatch(i, "is not a 2-5 speaker dialogue"),
            Stage::Sft if speakers(s) != speakers(&data[0]) => return mismatch(i, "has a different speaker set"),
            _ => {}
        }
    }
    Ok(())
}

/// Optimizes the weighted dual loss on `data` in place. Deterministic given the seed.
pub fn train(m: &mut DualModel, data: &[InterleavedSequence], stage: Stage, tc: &TrainConfig) -> Result<Vec<TrainLogRow>> {
    check_stage(stage, data)?;
    tc.weights.validate()?;
    if tc.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let v = m.vocab();
    let flats = data.iter().map(|s| flatten(s, &v)).collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(&m.params, tc.lr);
    let mut batches = Batches::new(flats.len(), tc.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch: Vec<_> = batches.next(tc.batch_size).into_iter().map(|i| flats[i].clone()).collect();
        let mut g = Graph::<f32>::new();
        let f = forward_graph(&m.cfg, &m.net, &m.params, &mut g, &batch, &tc.weights, tc.subsample, &mut rng)?;
        let val = |x| g.value(x).item() as f64;
        let loss = tc.weights.breakdown(val(f.backbone_ce), val(f.decoder_ce), val(f.text_ce));
        if !loss.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = g.backward(f.total);
        adam.step(&mut m.params, &grads);
        log.push(TrainLogRow { step, stage, loss });
    }
    m.stage = Some(stage);
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TfAccuracy {
    /// Argmax over the whole vocabulary at audio-frame targets.
    pub layer1: f64,
    /// The same at speaker tags that follow a finished segment.
    pub speaker_transition: f64,
}

pub fn teacher_forced_accuracy(m: &DualModel, data: &[InterleavedSequence]) -> Result<TfAccuracy> {
    let v = m.vocab();
    let (mut a_hit, mut a_n, mut s_hit, mut s_n) = (0usize, 0usize, 0usize, 0usize);
    for s in data {
        let flat = flatten(s, &v)?;
        let logits = m.backbone_logits(&flat)?;
        for (i, &id) in flat.ids.iter().enumerate() {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b }) as u32;
            match v.kind(id)? {
                TokenKind::Audio(_) => {
                    a_n += 1;
                    a_hit += (best == id) as usize;
                }
                TokenKind::Speaker(_) if i > 0 => {
                    s_n += 1;
                    s_hit += (best == id) as usize;
                }
                _ => {}
            }
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 1.0 } else { h as f64 / n as f64 };
    Ok(TfAccuracy {
        layer1: ratio(a_hit, a_n),
        speaker_transition: ratio(s_hit, s_n),
    })
}

#![allow(dead_code)]

use duotts::corpus::render;
use duotts::frontend::FrontendConfig;
use duotts::model::{forward_graph, DualModel, LossWeights, ModelConfig, Subsample};
use duotts::rvq::TokenGrid;
use duotts::sequence::{flatten, InterleavedSequence, Segment};
use duotts::tokenizer::{prepare, utterance_loss, Quant, TokenizerConfig, TokenizerModel};
use duotts_nn::gradcheck::{check, sample_coords, GradSample};
use duotts_nn::{Graph, Params, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const COORDS: usize = 120;
/// Below this magnitude gradients are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn small_tokenizer_cfg() -> TokenizerConfig {
    TokenizerConfig {
        hidden: 16,
        n_layers: 4,
        n_entries: 32,
        acoustic_dim: 8,
        adapter_dim: 4,
        frontend: FrontendConfig {
            d_latent: 8,
            ..FrontendConfig::default()
        },
        ..TokenizerConfig::default()
    }
}

pub fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_entries: 16,
        backbone_dim: 16,
        backbone_blocks: 2,
        backbone_heads: 2,
        backbone_ff: 32,
        decoder_dim: 8,
        decoder_blocks: 1,
        decoder_heads: 2,
        decoder_ff: 16,
        max_index: 16,
        max_positions: 256,
    }
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = Normal::new(0.0, std).unwrap();
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| n.sample(rng)).collect())
}

/// Tokenizer loss with a frozen quantization offset, in f64.
pub fn tokenizer_gradcheck(seed: u64) -> Vec<GradSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = TokenizerModel::new(&small_tokenizer_cfg(), seed).unwrap();
    // the output layer starts at zero, which would hide every upstream gradient
    let w = m.net.dec_out.w;
    let shape = m.params.get(w).shape().to_vec();
    *m.params.get_mut(w) = randn(&shape, 0.05, &mut rng).cast();
    let audio = render(&[5, 40], 2);
    let prep = prepare(&m, &audio).unwrap();
    let t = prep.n_feature_frames() / 4;
    let d = m.cfg.frontend.d_latent;
    let offset = randn(&[t, d], 0.05, &mut rng);
    let target = randn(&[t, d], 0.2, &mut rng);
    let mut p: Params<f64> = m.params.cast();
    let loss = |p: &Params<f64>, g: &mut Graph<f64>| {
        let u = utterance_loss(g, p, &m, &prep, Quant::Frozen { offset: &offset, target: &target }, 1.0, 0.25).unwrap();
        u.total
    };
    let mut g = Graph::new();
    let total = loss(&p, &mut g);
    let grads = g.backward(total);
    let coords = sample_coords(&p, COORDS, &mut rng);
    // sums over thousands of samples: smaller steps drown in roundoff,
    // larger ones straddle L1 kinks
    check(
        &mut p,
        &coords,
        3e-5,
        FLOOR,
        |p| {
            let mut g = Graph::new();
            let v = loss(p, &mut g);
            g.value(v).item()
        },
        |id, i| grads.param(id).map_or(0.0, |t| t.data()[i]),
    )
}

pub fn random_sequence(seed: u64, turns: usize, cfg: &ModelConfig) -> InterleavedSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InterleavedSequence::new(
        (0..turns)
            .map(|i| {
                let n = rng.random_range(1..4);
                let frames = 2 * n;
                let codes = (0..frames * cfg.n_layers).map(|_| rng.random_range(0..cfg.n_entries as u16)).collect();
                Segment {
                    speaker: 1 + (i % 3) as u8,
                    text: (0..n).map(|_| rng.random_range(0..64)).collect(),
                    audio: Some(TokenGrid::new(frames, cfg.n_layers, cfg.n_entries, codes).unwrap()),
                }
            })
            .collect(),
    )
}

/// The weighted dual loss on a tiny dual model, in f64.
pub fn dual_gradcheck(seed: u64) -> Vec<GradSample> {
    let cfg = tiny_model_cfg();
    let m = DualModel::new(&cfg, seed).unwrap();
    let flat = flatten(&random_sequence(seed, 3, &cfg), &cfg.vocab()).unwrap();
    let w = LossWeights::default();
    let mut p: Params<f64> = m.params.cast();
    let loss = |p: &Params<f64>, g: &mut Graph<f64>| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        forward_graph(&cfg, &m.net, p, g, std::slice::from_ref(&flat), &w, Subsample::Segment, &mut rng).unwrap().total
    };
    let mut g = Graph::new();
    let total = loss(&p, &mut g);
    let grads = g.backward(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let coords = sample_coords(&p, COORDS, &mut rng);
    check(
        &mut p,
        &coords,
        1e-5,
        FLOOR,
        |p| {
            let mut g = Graph::new();
            let v = loss(p, &mut g);
            g.value(v).item()
        },
        |id, i| grads.param(id).map_or(0.0, |t| t.data()[i]),
    )
}

pub fn worst(samples: &[GradSample]) -> &GradSample {
    samples.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap()
}

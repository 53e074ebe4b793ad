use duotts::frontend::FrontendConfig;
use duotts::rvq::{CodebookSet, TokenGrid};
use duotts::sequence::{flatten, unflatten, InterleavedSequence, Segment, Vocab};
use duotts::tokenizer::{TokenizerConfig, TokenizerModel};
use duotts_nn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn codebooks_with_zero(layers: usize, entries: usize, dim: usize, seed: u64) -> CodebookSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cb = CodebookSet::random(layers, entries, dim, 1.0, &mut rng);
    let mut v = cb.vectors().to_vec();
    for l in 0..layers {
        let at = l * entries * dim;
        v[at..at + dim].fill(0.0);
    }
    CodebookSet::from_vectors(layers, entries, dim, v)
}

fn frames(n: usize, dim: usize, scale: f32, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[n, dim], (0..n * dim).map(|_| rng.random_range(-1.0..1.0) * scale).collect())
}

fn random_dialogue(rng: &mut ChaCha8Rng, v: &Vocab) -> InterleavedSequence {
    let n_speakers = rng.random_range(2..=5u8);
    let turns = rng.random_range(1..=10);
    InterleavedSequence::new(
        (0..turns)
            .map(|_| {
                let text_len = rng.random_range(1..6);
                let n_frames = rng.random_range(0..8);
                let codes = (0..n_frames * v.n_layers).map(|_| rng.random_range(0..v.n_audio as u16)).collect();
                Segment {
                    speaker: rng.random_range(1..=n_speakers),
                    text: (0..text_len).map(|_| rng.random_range(0..64)).collect(),
                    audio: Some(TokenGrid::new(n_frames, v.n_layers, v.n_audio, codes).unwrap()),
                }
            })
            .collect(),
    )
}

fn streaming_tokenizer() -> TokenizerModel {
    let cfg = TokenizerConfig {
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
    };
    let mut m = TokenizerModel::new(&cfg, 7).unwrap();
    // the output layer starts at zero; give it something to say
    let id = m.net.dec_out.w;
    for (i, v) in m.params.get_mut(id).data_mut().iter_mut().enumerate() {
        *v = ((i * 7919 % 1000) as f32 / 1000.0 - 0.5) * 0.01;
    }
    m.set_streaming();
    m
}

fn random_grid(rng: &mut ChaCha8Rng, n_frames: usize) -> TokenGrid {
    let codes = (0..n_frames * 4).map(|_| rng.random_range(0..32u16)).collect();
    TokenGrid::new(n_frames, 4, 32, codes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residual_never_grows_when_zero_is_an_entry(seed in any::<u64>(), scale in 0.01f32..4.0, n in 1usize..40) {
        let cb = codebooks_with_zero(6, 32, 8, seed);
        let q = cb.quantize_frames(&frames(n, 8, scale, seed ^ 1)).unwrap();
        for w in q.residual_norms.windows(2) {
            prop_assert!(w[1] <= w[0], "{:?}", q.residual_norms);
        }
    }

    #[test]
    fn codes_in_range_and_repeatable(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = CodebookSet::random(5, 16, 4, 1.0, &mut rng);
        let x = frames(n, 4, 2.0, seed);
        let a = cb.quantize_frames(&x).unwrap();
        prop_assert!(a.grid.codes().iter().all(|c| (*c as usize) < 16));
        prop_assert_eq!(a.grid, cb.quantize_frames(&x).unwrap().grid);
    }

    #[test]
    fn stream_chunks_join_to_decode(seed in any::<u64>(), n in 1usize..12, chunk in 1usize..14) {
        let m = streaming_tokenizer();
        let g = random_grid(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let full = m.decode(&g, m.samples_for(n)).unwrap().samples;
        let joined: Vec<f32> = m.stream_decode(&g, chunk).unwrap().into_iter().flat_map(|a| a.samples).collect();
        prop_assert_eq!(joined, full);
    }

    #[test]
    fn later_frames_never_change_earlier_chunks(seed in any::<u64>(), n in 2usize..12, t in 0usize..12) {
        let t = t % n;
        let m = streaming_tokenizer();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_grid(&mut rng, n);
        let mut h = g.clone();
        for c in h.frame_mut(t) {
            *c = (*c + 1 + rng.random_range(0..31u16)) % 32;
        }
        let a = m.stream_decode(&g, 1).unwrap();
        let b = m.stream_decode(&h, 1).unwrap();
        for i in 0..t {
            prop_assert_eq!(&a[i].samples, &b[i].samples, "chunk {} before perturbed frame {}", i, t);
        }
    }
}

#[test]
fn thousand_dialogues_round_trip() {
    let v = Vocab::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let seq = random_dialogue(&mut rng, &v);
        let flat = flatten(&seq, &v).unwrap();
        let back = unflatten(&flat.ids, &flat.frames, &v).unwrap();
        assert_eq!(back, seq);
        assert_eq!(flatten(&back, &v).unwrap(), flat);
    }
}

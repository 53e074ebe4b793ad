use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::rvq::TokenGrid;
use crate::sequence::Segment;

pub(crate) fn tiny() -> ModelConfig {
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

fn random_grid(rng: &mut ChaCha8Rng, frames: usize, cfg: &ModelConfig) -> TokenGrid {
    let codes = (0..frames * cfg.n_layers).map(|_| rng.random_range(0..cfg.n_entries as u16)).collect();
    TokenGrid::new(frames, cfg.n_layers, cfg.n_entries, codes).unwrap()
}

pub(crate) fn random_dialogue(seed: u64, turns: usize, cfg: &ModelConfig) -> InterleavedSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InterleavedSequence::new(
        (0..turns)
            .map(|i| {
                let n = rng.random_range(1..4);
                Segment {
                    speaker: 1 + (i % 2) as u8,
                    text: (0..n).map(|_| rng.random_range(0..64)).collect(),
                    audio: Some(random_grid(&mut rng, 2 * n, cfg)),
                }
            })
            .collect(),
    )
}

#[test]
fn loss_formula_examples() {
    let w = LossWeights::default();
    assert!((w.total(1.0, 0.5, 2.0) - 1.42).abs() < 1e-12);
    let w0 = LossWeights {
        lambda_decoder: 0.0,
        ..w
    };
    assert_eq!(w0.total(1.3, 9.0, 2.0), 2.0 * 1.3 + 0.01 * 2.0);
    assert!(LossWeights { lambda_decoder: 1.5, ..w }.validate().is_err());
    assert!(LossWeights { lambda_text: -1.0, ..w }.validate().is_err());
}

#[test]
fn segment_sampler_picks_one_of_eight() {
    // 8 segments of 3 frames each
    let frames: Vec<(usize, usize)> = (0..24).map(|i| (100 + i, i / 3)).collect();
    let mut seen = [0usize; 8];
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = sample_decoder_frames(&frames, 0.125, Subsample::Segment, &mut rng);
        assert_eq!(rows.len(), 3);
        let seg = (rows[0] - 100) / 3;
        assert_eq!(rows, vec![100 + seg * 3, 101 + seg * 3, 102 + seg * 3]);
        seen[seg] += 1;
        let mut again = ChaCha8Rng::seed_from_u64(seed);
        assert_eq!(sample_decoder_frames(&frames, 0.125, Subsample::Segment, &mut again), rows);
    }
    assert!(seen.iter().all(|c| *c > 0), "{seen:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(sample_decoder_frames(&frames[..3], 0.125, Subsample::Segment, &mut rng).len(), 3);
    assert_eq!(sample_decoder_frames(&frames, 0.125, Subsample::Frame, &mut rng).len(), 3);
}

#[test]
fn forward_rejects_text_only_sequences() {
    let cfg = tiny();
    let m = DualModel::new(&cfg, 0).unwrap();
    let seq = InterleavedSequence::new(vec![Segment {
        speaker: 1,
        text: vec![1, 2],
        audio: None,
    }]);
    assert!(m.forward_teacher_forced(&seq, &LossWeights::default(), 0, Subsample::Segment).is_err());
    let ok = random_dialogue(1, 3, &cfg);
    let l = m.forward_teacher_forced(&ok, &LossWeights::default(), 0, Subsample::Segment).unwrap();
    assert!(l.backbone_ce > 0.0 && l.decoder_ce > 0.0 && l.text_ce > 0.0);
    assert_eq!(l.total, LossWeights::default().total(l.backbone_ce, l.decoder_ce, l.text_ce));
}

#[test]
fn backbone_is_causal() {
    let cfg = tiny();
    let m = DualModel::new(&cfg, 3).unwrap();
    let v = cfg.vocab();
    let seq = random_dialogue(4, 3, &cfg);
    let a = flatten(&seq, &v).unwrap();
    let la = m.backbone_logits(&a).unwrap();
    let t = a.len() / 2;
    let mut b = a.clone();
    for i in t + 1..b.len() {
        if let Some(f) = b.frames[i].as_mut() {
            f[0] = (f[0] + 5) % 16;
            f[2] = (f[2] + 1) % 16;
            b.ids[i] = v.audio(f[0]);
        } else if b.ids[i] < 64 {
            b.ids[i] = (b.ids[i] + 7) % 64;
        }
    }
    let lb = m.backbone_logits(&b).unwrap();
    // row i sees inputs up to position i - 1 of the flattened ids
    for i in 0..=t + 1 {
        assert_eq!(la.row(i), lb.row(i), "row {i}");
    }
    assert_ne!(la.row(a.len() - 1), lb.row(a.len() - 1));
}

#[test]
fn session_matches_teacher_forcing() {
    let cfg = tiny();
    let m = DualModel::new(&cfg, 5).unwrap();
    let flat = flatten(&random_dialogue(6, 2, &cfg), &cfg.vocab()).unwrap();
    let tf = m.backbone_logits(&flat).unwrap();
    let mut s = Session::new(&m, SamplingConfig::greedy(), 0);
    for i in 0..flat.len() {
        let l = s.logits();
        for (a, b) in l.iter().zip(tf.row(i)) {
            assert!((a - b).abs() < 1e-4, "position {i}: {a} vs {b}");
        }
        s.feed(flat.ids[i], flat.frames[i].as_deref()).unwrap();
    }
}

#[test]
fn frame_trace_counts() {
    let cfg = ModelConfig {
        n_layers: 16,
        ..tiny()
    };
    let mut m = DualModel::new(&cfg, 1).unwrap();
    let v = cfg.vocab();
    let mut s = Session::new(&m, SamplingConfig::default(), 0);
    s.feed(v.speaker(1).unwrap(), None).unwrap();
    s.feed(3, None).unwrap();
    s.feed(v.eot(), None).unwrap();
    let mut trace = ScheduleTrace::new();
    // force an audio id by greedy over a head that only scores audio
    let h = s.hidden().to_vec();
    drop(s);
    let head = m.net.head.w;
    let w = m.params.get_mut(head);
    for id in 0..v.size() {
        let val = if v.is_audio(id as u32) { 0.0 } else { -1.0 };
        let row: Vec<f32> = h.iter().map(|x| x * val).collect();
        w.row_mut(id).copy_from_slice(&row);
    }
    let mut s = Session::new(&m, SamplingConfig::default(), 0);
    for id in [v.speaker(1).unwrap(), 3, v.eot()] {
        s.feed(id, None).unwrap();
    }
    match s.generate_frame(&mut trace) {
        FrameOut::Frame(codes) => assert_eq!(codes.len(), 16),
        FrameOut::Eoa => panic!("expected a frame"),
    }
    assert_eq!(trace.count(Network::Backbone), 1);
    assert_eq!(trace.count(Network::Decoder), 15);
    assert!(trace.rows.windows(2).all(|r| r[0].step_index < r[1].step_index));

    // now make EOA the only positive score
    let w = m.params.get_mut(head);
    for id in 0..v.size() {
        let val = if id as u32 == v.eoa() { 1.0 } else { -1.0 };
        let row: Vec<f32> = h.iter().map(|x| x * val).collect();
        w.row_mut(id).copy_from_slice(&row);
    }
    let mut s = Session::new(&m, SamplingConfig::greedy(), 0);
    for id in [v.speaker(1).unwrap(), 3, v.eot()] {
        s.feed(id, None).unwrap();
    }
    let mut trace = ScheduleTrace::new();
    assert_eq!(s.generate_frame(&mut trace), FrameOut::Eoa);
    assert_eq!(trace.count(Network::Decoder), 0);
}

#[test]
fn greedy_generation_is_deterministic() {
    let cfg = tiny();
    let m = DualModel::new(&cfg, 2).unwrap();
    let flat = flatten(&random_dialogue(2, 2, &cfg), &cfg.vocab()).unwrap();
    let run = |seed| {
        let mut s = Session::new(&m, SamplingConfig::greedy(), seed);
        s.feed_flat(&flat).unwrap();
        (0..5).map(|_| s.generate_frame(&mut ScheduleTrace::new())).collect::<Vec<_>>()
    };
    assert_eq!(run(0), run(99));
}

#[test]
fn feed_rejects_malformed_tokens() {
    let cfg = tiny();
    let m = DualModel::new(&cfg, 2).unwrap();
    let v = cfg.vocab();
    let mut s = Session::new(&m, SamplingConfig::greedy(), 0);
    assert!(s.feed(v.audio(3), None).is_err());
    assert!(s.feed(v.audio(3), Some(&[4, 0, 0, 0])).is_err());
    assert!(s.feed(v.bos(), None).is_err());
    assert!(s.feed(5, Some(&[5, 0, 0, 0])).is_err());
    s.feed(v.audio(3), Some(&[3, 0, 0, 0])).unwrap();
}

#[test]
fn delay_examples() {
    assert_eq!(first_frame_steps(16), 16);
    assert_eq!(first_frame_steps(1), 1);
    let g = TokenGrid::new(3, 1, 8, vec![1, 2, 3]).unwrap();
    let d = apply_delay(&g);
    assert_eq!(d.codes, vec![Some(1), Some(2), Some(3)]);
    let g = TokenGrid::new(2, 3, 8, vec![1, 2, 3, 4, 5, 6]).unwrap();
    let d = apply_delay(&g);
    assert_eq!(d.n_cols, 4);
    assert_eq!(d.codes, vec![Some(1), None, None, Some(4), Some(2), None, None, Some(5), Some(3), None, None, Some(6)]);
}

proptest! {
    #[test]
    fn delay_round_trip(frames in 0usize..12, layers in 1usize..17, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = (0..frames * layers).map(|_| rng.random_range(0..2048u16)).collect();
        let g = TokenGrid::new(frames, layers, 2048, codes).unwrap();
        prop_assert_eq!(unapply_delay(&apply_delay(&g)).unwrap(), g);
    }

    #[test]
    fn step_count_dominance(n in 2usize..=16) {
        prop_assert!(1 < first_frame_steps(n));
    }
}

#[test]
fn stage_data_mismatch() {
    let cfg = tiny();
    let mut m = DualModel::new(&cfg, 0).unwrap();
    let dlg = vec![random_dialogue(1, 3, &cfg)];
    let tc = TrainConfig {
        steps: 1,
        ..Default::default()
    };
    assert!(train(&mut m, &dlg, Stage::Pretrain, &tc).is_err());
    let mono = vec![random_dialogue(1, 1, &cfg)];
    assert!(train(&mut m, &mono, Stage::Posttrain, &tc).is_err());
    let mut other = random_dialogue(2, 3, &cfg);
    other.segments[0].speaker = 3;
    assert!(train(&mut m, &[dlg[0].clone(), other], Stage::Sft, &tc).is_err());
    train(&mut m, &mono, Stage::Pretrain, &tc).unwrap();
    assert_eq!(m.stage, Some(Stage::Pretrain));
}

#[test]
fn training_is_deterministic_and_learns() {
    let cfg = tiny();
    let data: Vec<_> = (0..4).map(|i| random_dialogue(10 + i, 2, &cfg)).collect();
    let tc = TrainConfig {
        steps: 60,
        batch_size: 2,
        lr: 3e-3,
        ..Default::default()
    };
    let run = || {
        let mut m = DualModel::new(&cfg, 7).unwrap();
        let log = train(&mut m, &data, Stage::Posttrain, &tc).unwrap();
        (m, log)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1, l2);
    let mut b1 = vec![];
    let mut b2 = vec![];
    m1.write_to(&mut b1).unwrap();
    m2.write_to(&mut b2).unwrap();
    assert_eq!(b1, b2);
    assert!(l1.last().unwrap().loss.backbone_ce < l1[0].loss.backbone_ce);
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny();
    let mut m = DualModel::new(&cfg, 9).unwrap();
    m.stage = Some(Stage::Sft);
    let mut buf = vec![];
    m.write_to(&mut buf).unwrap();
    let back = DualModel::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back.stage, Some(Stage::Sft));
    assert_eq!(back.cfg, cfg);
    let mut again = vec![];
    back.write_to(&mut again).unwrap();
    assert_eq!(buf, again);
}

fn ce(logits: &[f32], target: usize) -> f64 {
    let mx = logits.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
    let lse = mx + logits.iter().map(|x| (*x as f64 - mx).exp()).sum::<f64>().ln();
    lse - logits[target] as f64
}

#[test]
fn decoder_sees_only_its_frame_and_hidden() {
    let cfg = tiny();
    let m = DualModel::new(&cfg, 8).unwrap();
    let v = cfg.vocab();
    let seq = random_dialogue(9, 2, &cfg);
    let flat = flatten(&seq, &v).unwrap();
    // every frame trains the decoder
    let w = LossWeights {
        decoder_segment_fraction: 1.0,
        ..LossWeights::default()
    };
    let packed = m.forward_teacher_forced(&seq, &w, 0, Subsample::Frame).unwrap().decoder_ce;
    let mut s = Session::new(&m, SamplingConfig::greedy(), 0);
    let (mut sum, mut count) = (0.0, 0);
    for i in 0..flat.len() {
        if let Some(frame) = &flat.frames[i] {
            let lg = m.decoder_logits(s.hidden(), frame);
            for (l, row) in lg.iter().enumerate() {
                sum += ce(row, frame[l + 1] as usize);
            }
            count += 1;
        }
        s.feed(flat.ids[i], flat.frames[i].as_deref()).unwrap();
    }
    // the packed graph loss is the mean of per-frame losses that see only
    // (hidden, own frame)
    let per_frame = sum / (count * (cfg.n_layers - 1)) as f64;
    assert!((packed - per_frame).abs() < 1e-4, "{packed} vs {per_frame}");
}

#[test]
fn sampled_decoding_follows_decoder_logits() {
    let cfg = tiny();
    let m = DualModel::new(&cfg, 10).unwrap();
    let mut s = Session::new(&m, SamplingConfig::greedy(), 0);
    let h = s.hidden().to_vec();
    let codes = s.complete_frame(3);
    let lg = m.decoder_logits(&h, &codes);
    for (l, row) in lg.iter().enumerate() {
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        assert_eq!(codes[l + 1] as usize, best);
    }
}

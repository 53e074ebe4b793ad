//! Turn-by-turn synthesis on top of the dual-transformer model and the
//! tokenizer decoder.

use std::sync::mpsc::SyncSender;

use duotts_nn::layers::Linear;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioSignal;
use crate::corpus::SynthUtterance;
use crate::error::{Error, Result};
use crate::model::{clock, DualModel, FrameOut, SamplingConfig, Session};
use crate::rvq::TokenGrid;
use crate::sequence::{build_cloning_prompt, flatten, Flattened, InterleavedSequence, PodcastPlan, Segment};
use crate::tokenizer::TokenizerModel;

pub use crate::model::{Network, ScheduleTrace, TraceRow};

/// 20 s at 12.5 Hz.
pub const MAX_FRAMES: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub sampling: SamplingConfig,
    pub max_frames: usize,
    pub stream: bool,
    /// Token frames per streamed audio chunk.
    pub chunk_frames: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            max_frames: MAX_FRAMES,
            stream: false,
            chunk_frames: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TurnResult {
    pub speaker: u8,
    pub text: Vec<u16>,
    pub audio: AudioSignal,
    pub grid: TokenGrid,
    /// `max_frames` reached before EOA.
    pub truncated: bool,
    pub trace: ScheduleTrace,
}

/// A dialogue in progress: the context so far and the session holding its
/// key/value cache.
pub struct Conversation<'a> {
    model: &'a DualModel,
    tok: &'a TokenizerModel,
    pub cfg: EngineConfig,
    pub context: InterleavedSequence,
    session: Session<'a>,
    turns: u64,
}

impl<'a> Conversation<'a> {
    pub fn new(model: &'a DualModel, tok: &'a TokenizerModel, context: InterleavedSequence, cfg: EngineConfig) -> Result<Self> {
        check_pair(model, tok)?;
        if cfg.max_frames == 0 || cfg.chunk_frames == 0 {
            return Err(Error::invalid("max_frames and chunk_frames must be positive"));
        }
        if context.segments.iter().any(|s| s.audio.is_none()) {
            return Err(Error::invalid("context segments must all have audio"));
        }
        let flat = flatten(&context, &model.vocab())?;
        let mut session = Session::new(model, cfg.sampling, cfg.seed);
        session.feed_flat(&flat)?;
        Ok(Self {
            model,
            tok,
            cfg,
            context,
            session,
            turns: 0,
        })
    }

    /// Flattened length of the context.
    pub fn context_len(&self) -> usize {
        self.session.len()
    }

    /// Drops whole segments from the front until `extra` more positions fit.
    fn make_room(&mut self, extra: usize) -> Result<()> {
        let cap = self.model.cfg.max_positions;
        if extra + 1 > cap {
            return Err(Error::invalid(format!("a turn of {extra} positions cannot fit in {cap}")));
        }
        if self.session.len() + extra < cap {
            return Ok(());
        }
        let mut len = self.context.flat_len();
        let mut drop = 0;
        while len + extra >= cap && drop < self.context.segments.len() {
            len -= self.context.segments[drop].flat_len();
            drop += 1;
        }
        self.context.segments.drain(..drop);
        let flat = flatten(&self.context, &self.model.vocab())?;
        self.session = Session::new(self.model, self.cfg.sampling, self.cfg.seed.wrapping_add(self.turns));
        self.session.feed_flat(&flat)
    }

    /// Appends `[Sk] text EOT`, generates frames until EOA or `max_frames`,
    /// and closes the segment. Streamed chunks go to `sink` in order; a
    /// bounded channel makes the producer wait for a slow consumer.
    pub fn synthesize_turn(&mut self, speaker: u8, text: &[u16], sink: Option<&SyncSender<Vec<f32>>>) -> Result<TurnResult> {
        if text.is_empty() {
            return Err(Error::invalid("empty text"));
        }
        let v = self.model.vocab();
        let open = Segment {
            speaker,
            text: text.to_vec(),
            audio: None,
        };
        let mut head = Flattened::default();
        open.flatten_into(&v, &mut head)?;
        self.make_room(head.len() + self.cfg.max_frames + 1)?;
        let mut trace = ScheduleTrace::new();
        self.session.feed_flat(&head)?;
        let mut grid = TokenGrid::empty(v.n_layers, v.n_audio);
        let mut streamer = if self.cfg.stream { Some(self.tok.streaming_decoder()?) } else { None };
        let mut streamed = vec![];
        let mut pending = 0usize;
        let mut chunks = 0usize;
        let mut emit = |grid: &TokenGrid, from: usize, streamed: &mut Vec<f32>, trace: &mut ScheduleTrace| -> Result<()> {
            if let Some(dec) = streamer.as_mut() {
                let chunk = dec.push(&grid.slice(from, grid.n_frames))?;
                trace.push(Network::Acoustic, chunks);
                chunks += 1;
                if let Some(tx) = sink {
                    tx.send(chunk.clone()).map_err(|_| Error::invalid("audio consumer hung up"))?;
                }
                streamed.extend_from_slice(&chunk);
            }
            Ok(())
        };
        let mut truncated = true;
        while grid.n_frames < self.cfg.max_frames {
            match self.session.generate_frame(&mut trace) {
                FrameOut::Eoa => {
                    truncated = false;
                    break;
                }
                FrameOut::Frame(codes) => {
                    self.session.feed(v.audio(codes[0]), Some(&codes))?;
                    grid.push_frame(&codes);
                    pending += 1;
                    if pending == self.cfg.chunk_frames {
                        emit(&grid, grid.n_frames - pending, &mut streamed, &mut trace)?;
                        pending = 0;
                    }
                }
            }
        }
        if pending > 0 {
            emit(&grid, grid.n_frames - pending, &mut streamed, &mut trace)?;
        }
        self.session.feed(v.eoa(), None)?;
        let audio = if self.cfg.stream {
            AudioSignal::new(streamed)
        } else if grid.n_frames == 0 {
            AudioSignal::new(vec![])
        } else {
            let a = self.tok.decode(&grid, self.tok.samples_for(grid.n_frames))?;
            trace.push(Network::Acoustic, 0);
            a
        };
        self.context.segments.push(Segment {
            speaker,
            text: text.to_vec(),
            audio: Some(grid.clone()),
        });
        self.turns += 1;
        Ok(TurnResult {
            speaker,
            text: text.to_vec(),
            audio,
            grid,
            truncated,
            trace,
        })
    }
}

fn check_pair(model: &DualModel, tok: &TokenizerModel) -> Result<()> {
    if model.cfg.n_layers != tok.cfg.n_layers || model.cfg.n_entries != tok.cfg.n_entries {
        return Err(Error::invalid(format!(
            "model expects {}x{} codes, tokenizer produces {}x{}",
            model.cfg.n_layers, model.cfg.n_entries, tok.cfg.n_layers, tok.cfg.n_entries
        )));
    }
    Ok(())
}

/// One turn on top of `context`, which is extended with the new segment.
pub fn synthesize_turn(
    model: &DualModel,
    tok: &TokenizerModel,
    context: &mut InterleavedSequence,
    speaker: u8,
    text: &[u16],
    cfg: &EngineConfig,
) -> Result<TurnResult> {
    let mut c = Conversation::new(model, tok, context.clone(), cfg.clone())?;
    let r = c.synthesize_turn(speaker, text, None)?;
    *context = c.context;
    Ok(r)
}

#[derive(Debug, Clone)]
pub struct CloneResult {
    pub audio: AudioSignal,
    /// Generated frames only.
    pub grid: TokenGrid,
    pub prompt_frames: usize,
    pub truncated: bool,
}

/// Continues `[S1] prompt_text target_text EOT prompt_frames`, decodes
/// prompt and continuation together, then cuts the prompt region.
pub fn clone_voice(
    model: &DualModel,
    tok: &TokenizerModel,
    prompt_audio: &AudioSignal,
    prompt_text: &[u16],
    target_text: &[u16],
    cfg: &EngineConfig,
) -> Result<CloneResult> {
    check_pair(model, tok)?;
    if prompt_audio.is_empty() {
        return Err(Error::invalid("empty prompt audio"));
    }
    let prompt_grid = tok.encode(prompt_audio)?;
    let v = model.vocab();
    let prompt = build_cloning_prompt(prompt_text, target_text, &prompt_grid, &v)?;
    let mut s = Session::new(model, cfg.sampling, cfg.seed);
    s.feed_flat(&prompt.flat)?;
    let mut full = prompt_grid.clone();
    let mut trace = ScheduleTrace::new();
    let mut truncated = true;
    while full.n_frames - prompt.prompt_frames < cfg.max_frames {
        match s.generate_frame(&mut trace) {
            FrameOut::Eoa => {
                truncated = false;
                break;
            }
            FrameOut::Frame(codes) => {
                s.feed(v.audio(codes[0]), Some(&codes))?;
                full.push_frame(&codes);
            }
        }
    }
    let decoded = tok.decode(&full, tok.samples_for(full.n_frames))?;
    let cut = tok.samples_for(prompt.prompt_frames);
    Ok(CloneResult {
        audio: AudioSignal::new(decoded.samples[cut..].to_vec()),
        grid: full.slice(prompt.prompt_frames, full.n_frames),
        prompt_frames: prompt.prompt_frames,
        truncated,
    })
}

/// Generates the plan's turns one at a time, each conditioned on every
/// turn before it. Truncation is recorded per turn.
pub fn run_podcast(model: &DualModel, tok: &TokenizerModel, plan: &PodcastPlan, cfg: &EngineConfig) -> Result<Vec<TurnResult>> {
    let mut c = Conversation::new(model, tok, plan.context.clone(), cfg.clone())?;
    let mut out = Vec::with_capacity(plan.steps.len());
    for (speaker, text) in &plan.steps {
        let before = c.context_len();
        let turns_before = c.context.segments.len();
        let r = c.synthesize_turn(*speaker, text, None)?;
        if c.context.segments.len() == turns_before + 1 {
            let grown = c.context_len() - before;
            debug_assert_eq!(grown, c.context.segments.last().map_or(0, Segment::flat_len));
        }
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Dual,
    Delay,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub mode: ScheduleMode,
    pub n_layers: usize,
    pub first_packet_steps_backbone: usize,
    pub first_packet_steps_decoder: usize,
    /// Informational only.
    pub first_packet_wall_ms: f64,
    pub frames: usize,
    pub backbone_steps_per_frame: f64,
    pub decoder_steps_per_frame: f64,
    pub frames_per_second: f64,
}

/// Runs `frames` frames of `text` in the chosen schedule and reads the step
/// counts off the trace. The delay schedule uses the same backbone with
/// `N` freshly initialized parallel heads; only its step accounting matters.
pub fn benchmark_latency(model: &DualModel, tok: &TokenizerModel, mode: ScheduleMode, n: usize, text: &[u16], frames: usize) -> Result<(LatencyReport, ScheduleTrace)> {
    check_pair(model, tok)?;
    if n != model.cfg.n_layers {
        return Err(Error::invalid(format!("benchmark asks for {n} layers, model has {}", model.cfg.n_layers)));
    }
    if text.is_empty() || frames == 0 {
        return Err(Error::invalid("benchmark needs text and at least one frame"));
    }
    let v = model.vocab();
    let mut s = Session::new(model, SamplingConfig::default(), 0);
    let open = Segment {
        speaker: 1,
        text: text.to_vec(),
        audio: None,
    };
    let mut head = Flattened::default();
    open.flatten_into(&v, &mut head)?;
    let mut dec = tok.streaming_decoder()?;
    let start = clock();
    let mut trace = ScheduleTrace::new();
    s.feed_flat(&head)?;
    match mode {
        ScheduleMode::Dual => {
            for f in 0..frames {
                let codes = s.generate_audio_frame(&mut trace);
                dec.push(&TokenGrid::new(1, n, v.n_audio, codes.clone())?)?;
                trace.push(Network::Acoustic, f);
                s.feed(v.audio(codes[0]), Some(&codes))?;
            }
        }
        ScheduleMode::Delay => {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut p = model.params.clone();
            let heads: Vec<Linear> = (0..n).map(|l| Linear::new(&mut p, &format!("delay.head{l}"), model.cfg.backbone_dim, v.n_audio, false, &mut rng)).collect();
            let cand: Vec<usize> = (0..v.n_audio).collect();
            let mut sampler = ChaCha8Rng::seed_from_u64(2);
            let mut columns: Vec<Vec<u16>> = vec![];
            let mut done = 0;
            let mut step = 0;
            while done < frames {
                let mut col = vec![0u16; n];
                for (l, h) in heads.iter().enumerate() {
                    let mut lg = vec![0.0; v.n_audio];
                    h.apply_row(&p, s.hidden(), &mut lg);
                    col[l] = s.sampling.sample(&lg, &cand, &mut sampler) as u16;
                }
                trace.push(Network::Backbone, step);
                columns.push(col.clone());
                step += 1;
                // frame t is complete once column t + n - 1 exists
                if columns.len() >= n {
                    let t = columns.len() - n;
                    let codes: Vec<u16> = (0..n).map(|l| columns[t + l][l]).collect();
                    dec.push(&TokenGrid::new(1, n, v.n_audio, codes)?)?;
                    trace.push(Network::Acoustic, done);
                    done += 1;
                }
                s.feed(v.audio(col[0]), Some(&col))?;
            }
        }
    }
    let elapsed = start.map_or(0.0, |s| s.elapsed().as_secs_f64());
    let (b, d) = trace.first_packet_steps().expect("at least one chunk");
    let report = LatencyReport {
        mode,
        n_layers: n,
        first_packet_steps_backbone: b,
        first_packet_steps_decoder: d,
        first_packet_wall_ms: trace.first_packet_ns().unwrap_or(0) as f64 / 1e6,
        frames,
        backbone_steps_per_frame: trace.count(Network::Backbone) as f64 / frames as f64,
        decoder_steps_per_frame: trace.count(Network::Decoder) as f64 / frames as f64,
        frames_per_second: if elapsed > 0.0 { frames as f64 / elapsed } else { 0.0 },
    };
    Ok((report, trace))
}

/// Encodes synthetic turns into one interleaved sequence. Monologues are
/// always tagged `[S1]`; dialogue turns keep their speaker number.
pub fn encode_turns(tok: &TokenizerModel, turns: &[SynthUtterance], monologue: bool) -> Result<InterleavedSequence> {
    turns
        .iter()
        .map(|u| {
            Ok(Segment {
                speaker: if monologue { 1 } else { u.speaker_id },
                text: u.text.clone(),
                audio: Some(tok.encode(&u.audio)?),
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(InterleavedSequence::new)
}

#[cfg(test)]
mod tests {
    use std::sync::mpsc::sync_channel;

    use rand::Rng;

    use super::*;
    use crate::frontend::FrontendConfig;
    use crate::model::ModelConfig;
    use crate::sequence::build_podcast_prompt;
    use crate::tokenizer::TokenizerConfig;

    const ENTRIES: usize = 64;

    fn pair(n_layers: usize) -> (DualModel, TokenizerModel) {
        let mc = ModelConfig {
            n_layers,
            n_entries: ENTRIES,
            backbone_dim: 32,
            backbone_blocks: 1,
            backbone_heads: 2,
            backbone_ff: 32,
            decoder_dim: 16,
            decoder_blocks: 1,
            decoder_heads: 2,
            decoder_ff: 16,
            max_index: 32,
            max_positions: 512,
        };
        let tc = TokenizerConfig {
            hidden: 16,
            n_layers,
            n_entries: ENTRIES,
            acoustic_dim: 8,
            adapter_dim: 4,
            frontend: FrontendConfig {
                d_latent: 8,
                ..FrontendConfig::default()
            },
            ..TokenizerConfig::default()
        };
        let mut tok = TokenizerModel::new(&tc, 1).unwrap();
        tok.set_streaming();
        (DualModel::new(&mc, 2).unwrap(), tok)
    }

    fn context(n_layers: usize, speakers: &[u8], seed: u64) -> InterleavedSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        InterleavedSequence::new(
            speakers
                .iter()
                .map(|&speaker| {
                    let frames = rng.random_range(2..6);
                    let codes = (0..frames * n_layers).map(|_| rng.random_range(0..ENTRIES as u16)).collect();
                    Segment {
                        speaker,
                        text: vec![rng.random_range(0..64); frames / 2],
                        audio: Some(TokenGrid::new(frames, n_layers, ENTRIES, codes).unwrap()),
                    }
                })
                .collect(),
        )
    }

    fn cfg(stream: bool, chunk_frames: usize) -> EngineConfig {
        EngineConfig {
            max_frames: 7,
            stream,
            chunk_frames,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn streamed_turn_matches_offline_turn() {
        let (m, tok) = pair(16);
        let ctx = context(16, &[1, 2], 0);
        let mut off = Conversation::new(&m, &tok, ctx.clone(), cfg(false, 1)).unwrap();
        let a = off.synthesize_turn(1, &[3, 9], None).unwrap();
        assert!(a.grid.n_frames > 0);
        for chunk in [1, 2, 7] {
            let mut on = Conversation::new(&m, &tok, ctx.clone(), cfg(true, chunk)).unwrap();
            let (tx, rx) = sync_channel(64);
            let b = on.synthesize_turn(1, &[3, 9], Some(&tx)).unwrap();
            drop(tx);
            assert_eq!(a.grid, b.grid);
            assert_eq!(a.truncated, b.truncated);
            assert_eq!(a.audio.samples, b.audio.samples, "chunk {chunk}");
            let received: Vec<f32> = rx.iter().flatten().collect();
            assert_eq!(received, b.audio.samples);
            assert_eq!(b.trace.count(Network::Acoustic), b.grid.n_frames.div_ceil(chunk));
            if chunk == 1 {
                assert_eq!(b.trace.first_packet_steps(), Some((1, 15)));
            }
        }
    }

    #[test]
    fn turns_extend_the_context_in_order() {
        let (m, tok) = pair(4);
        let v = m.vocab();
        let ctx = context(4, &[1, 2], 1);
        let steps = vec![(1u8, vec![5u16]), (2, vec![6, 7]), (1, vec![8])];
        let plan = build_podcast_prompt(&ctx.segments, &steps, &v).unwrap();
        let mut c = Conversation::new(&m, &tok, plan.context.clone(), cfg(false, 1)).unwrap();
        for (speaker, text) in &plan.steps {
            let before = c.context_len();
            let r = c.synthesize_turn(*speaker, text, None).unwrap();
            assert_eq!(r.speaker, *speaker);
            assert_eq!(&r.text, text);
            assert_eq!(r.audio.len(), if r.grid.n_frames == 0 { 0 } else { tok.samples_for(r.grid.n_frames) });
            assert!(r.grid.n_frames <= 7);
            assert!(!r.truncated || r.grid.n_frames == 7);
            let seg = c.context.segments.last().unwrap();
            assert_eq!(c.context_len() - before, seg.flat_len());
        }
        assert_eq!(c.context.segments.len(), 5);
        let out = run_podcast(&m, &tok, &plan, &cfg(false, 1)).unwrap();
        let spk: Vec<u8> = out.iter().map(|r| r.speaker).collect();
        assert_eq!(spk, vec![1, 2, 1]);
        assert_eq!(out[2].grid, c.context.segments[4].audio.clone().unwrap());
    }

    #[test]
    fn context_is_trimmed_by_whole_segments() {
        let (mut m, tok) = pair(2);
        m.cfg.max_positions = 40;
        let ctx = context(2, &[1, 2, 1, 2, 1, 2], 2);
        assert!(ctx.flat_len() > 20);
        let mut c = Conversation::new(&m, &tok, ctx.clone(), cfg(false, 1)).unwrap();
        c.synthesize_turn(2, &[1, 2, 3], None).unwrap();
        assert!(c.context_len() < 40);
        let kept = c.context.segments.len() - 1;
        assert_eq!(&c.context.segments[..kept], &ctx.segments[ctx.segments.len() - kept..]);
    }

    #[test]
    fn bad_requests_are_rejected() {
        let (m, tok) = pair(4);
        let mut c = Conversation::new(&m, &tok, context(4, &[1], 3), cfg(false, 1)).unwrap();
        assert!(c.synthesize_turn(1, &[], None).is_err());
        let (_, tok8) = pair(8);
        assert!(Conversation::new(&m, &tok8, InterleavedSequence::default(), cfg(false, 1)).is_err());
        let mut open = context(4, &[1], 3);
        open.segments[0].audio = None;
        assert!(Conversation::new(&m, &tok, open, cfg(false, 1)).is_err());
    }

    #[test]
    fn cloning_returns_only_the_continuation() {
        let (m, tok) = pair(4);
        let prompt = crate::corpus::render(&[7, 8], 3);
        let r = clone_voice(&m, &tok, &prompt, &[7, 8], &[1, 2], &cfg(false, 1)).unwrap();
        assert_eq!(r.prompt_frames, tok.encode(&prompt).unwrap().n_frames);
        let total = r.prompt_frames + r.grid.n_frames;
        assert_eq!(r.audio.len(), tok.samples_for(total) - tok.samples_for(r.prompt_frames));
        assert!(clone_voice(&m, &tok, &AudioSignal::new(vec![]), &[7], &[1], &cfg(false, 1)).is_err());
    }

    #[test]
    fn first_packet_steps_per_schedule() {
        for n in 1..=16 {
            let (m, tok) = pair(n);
            let (d, _) = benchmark_latency(&m, &tok, ScheduleMode::Dual, n, &[1, 2], 3).unwrap();
            assert_eq!((d.first_packet_steps_backbone, d.first_packet_steps_decoder), (1, n - 1));
            assert_eq!(d.decoder_steps_per_frame, (n - 1) as f64);
            let (l, _) = benchmark_latency(&m, &tok, ScheduleMode::Delay, n, &[1, 2], 3).unwrap();
            assert_eq!((l.first_packet_steps_backbone, l.first_packet_steps_decoder), (n, 0));
        }
        let (m, tok) = pair(4);
        assert!(benchmark_latency(&m, &tok, ScheduleMode::Dual, 8, &[1], 1).is_err());
    }
}

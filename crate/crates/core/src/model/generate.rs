//! Incremental generation with a session-local key/value cache.

use std::time::Instant;

use duotts_nn::layers::KvCache;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DualModel, IndexCounter};
use crate::error::{Error, Result};
use crate::sequence::{Flattened, TokenKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// 0 means greedy.
    pub temperature: f64,
    pub top_k: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: 0.7, top_k: 32 }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        Self { temperature: 0.0, top_k: 1 }
    }

    /// Picks one of `candidates` (indices into `logits`). Greedy ties go to
    /// the first candidate.
    pub fn sample(&self, logits: &[f32], candidates: &[usize], rng: &mut ChaCha8Rng) -> usize {
        debug_assert!(!candidates.is_empty());
        if self.temperature <= 0.0 || self.top_k <= 1 {
            return candidates.iter().copied().fold(candidates[0], |b, c| if logits[c] > logits[b] { c } else { b });
        }
        let mut c: Vec<usize> = candidates.to_vec();
        c.sort_by(|a, b| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b)));
        c.truncate(self.top_k);
        let mx = logits[c[0]] as f64;
        let w: Vec<f64> = c.iter().map(|i| ((logits[*i] as f64 - mx) / self.temperature).exp()).collect();
        let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
        for (i, wi) in c.iter().zip(&w) {
            if u < *wi {
                return *i;
            }
            u -= wi;
        }
        *c.last().expect("nonempty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    Backbone,
    Decoder,
    Acoustic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step_index: usize,
    pub network: Network,
    pub layer_or_chunk: usize,
    pub wall_time_ns: u64,
}

/// Every autoregressive step and audio chunk, in execution order.
#[derive(Debug, Clone)]
pub struct ScheduleTrace {
    pub rows: Vec<TraceRow>,
    start: Option<Instant>,
}

impl Default for ScheduleTrace {
    fn default() -> Self {
        Self::new()
    }
}

/// `None` where the platform has no monotonic clock (browser wasm); wall
/// times then read 0.
pub fn clock() -> Option<Instant> {
    if cfg!(target_family = "wasm") {
        None
    } else {
        Some(Instant::now())
    }
}

impl ScheduleTrace {
    pub fn new() -> Self {
        Self {
            rows: vec![],
            start: clock(),
        }
    }

    pub fn push(&mut self, network: Network, layer_or_chunk: usize) {
        self.rows.push(TraceRow {
            step_index: self.rows.len(),
            network,
            layer_or_chunk,
            wall_time_ns: self.start.map_or(0, |s| s.elapsed().as_nanos() as u64),
        });
    }

    /// (backbone, decoder) rows before the first acoustic row.
    pub fn first_packet_steps(&self) -> Option<(usize, usize)> {
        let end = self.rows.iter().position(|r| r.network == Network::Acoustic)?;
        let count = |n| self.rows[..end].iter().filter(|r| r.network == n).count();
        Some((count(Network::Backbone), count(Network::Decoder)))
    }

    pub fn first_packet_ns(&self) -> Option<u64> {
        self.rows.iter().find(|r| r.network == Network::Acoustic).map(|r| r.wall_time_ns)
    }

    pub fn count(&self, n: Network) -> usize {
        self.rows.iter().filter(|r| r.network == n).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameOut {
    Eoa,
    Frame(Vec<u16>),
}

/// One generation stream over an immutable model.
pub struct Session<'a> {
    model: &'a DualModel,
    caches: Vec<KvCache<f32>>,
    counter: IndexCounter,
    hidden: Vec<f32>,
    pos: usize,
    /// Everything fed after BOS.
    pub history: Flattened,
    pub sampling: SamplingConfig,
    rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a DualModel, sampling: SamplingConfig, seed: u64) -> Self {
        let mut s = Self {
            model,
            caches: vec![KvCache::default(); model.net.blocks.len()],
            counter: IndexCounter::default(),
            hidden: vec![],
            pos: 0,
            history: Flattened::default(),
            sampling,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let bos = model.vocab().bos();
        s.step(bos, None, 0);
        s
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    fn embed(&self, id: u32, frame: Option<&[u16]>, index: usize) -> Vec<f32> {
        let p = &self.model.params;
        let net = &self.model.net;
        let cfg = &self.model.cfg;
        let mut x = p.get(net.index).row(index.min(cfg.max_index - 1)).to_vec();
        let tokens = p.get(net.tokens);
        match frame {
            Some(codes) => {
                let w = 1.0 / codes.len() as f32;
                for (o, v) in x.iter_mut().zip(tokens.row(id as usize)) {
                    *o += w * v;
                }
                for (l, c) in codes.iter().enumerate().skip(1) {
                    for (o, v) in x.iter_mut().zip(p.get(net.layer_tables[l - 1]).row(*c as usize)) {
                        *o += w * v;
                    }
                }
            }
            None => {
                for (o, v) in x.iter_mut().zip(tokens.row(id as usize)) {
                    *o += v;
                }
            }
        }
        x
    }

    fn step(&mut self, id: u32, frame: Option<&[u16]>, index: usize) {
        let p = &self.model.params;
        let net = &self.model.net;
        let pos = self.pos;
        self.pos += 1;
        let mut x = self.embed(id, frame, index);
        for (b, c) in net.blocks.iter().zip(self.caches.iter_mut()) {
            x = b.step(p, &x, pos, c);
        }
        let mut h = vec![0.0; x.len()];
        net.norm.apply_row(p, &x, &mut h);
        self.hidden = h;
    }

    /// Appends one token; audio ids need their full frame.
    pub fn feed(&mut self, id: u32, frame: Option<&[u16]>) -> Result<()> {
        let v = self.model.vocab();
        let kind = v.kind(id)?;
        match (kind, frame) {
            (TokenKind::Audio(c), Some(f)) if f.len() == v.n_layers && f[0] == c && f.iter().all(|x| (*x as usize) < v.n_audio) => {}
            (TokenKind::Audio(_), _) => return Err(Error::invalid("audio id fed without a matching frame")),
            (TokenKind::Bos | TokenKind::Pad, _) => return Err(Error::invalid(format!("{kind:?} cannot be fed"))),
            (_, None) => {}
            (_, Some(_)) => return Err(Error::invalid("frame attached to a non-audio id")),
        }
        let index = self.counter.next(kind);
        self.step(id, frame, index);
        self.history.ids.push(id);
        self.history.frames.push(frame.map(<[u16]>::to_vec));
        Ok(())
    }

    pub fn feed_flat(&mut self, flat: &Flattened) -> Result<()> {
        for (id, f) in flat.ids.iter().zip(&flat.frames) {
            self.feed(*id, f.as_deref())?;
        }
        Ok(())
    }

    /// Normalized backbone output at the last fed position.
    pub fn hidden(&self) -> &[f32] {
        &self.hidden
    }

    /// Backbone logits at the last fed position.
    pub fn logits(&self) -> Vec<f32> {
        let net = &self.model.net;
        let mut out = vec![0.0; net.head.d_out];
        net.head.apply_row(&self.model.params, &self.hidden, &mut out);
        out
    }

    /// Samples the next frame from the current state: one backbone
    /// prediction over audio-or-EOA ids, then one decoder step per
    /// remaining layer. The result is not fed back.
    pub fn generate_frame(&mut self, trace: &mut ScheduleTrace) -> FrameOut {
        self.generate(trace, true)
    }

    /// As [`Session::generate_frame`] with EOA masked out.
    pub fn generate_audio_frame(&mut self, trace: &mut ScheduleTrace) -> Vec<u16> {
        match self.generate(trace, false) {
            FrameOut::Frame(codes) => codes,
            FrameOut::Eoa => unreachable!("EOA is masked"),
        }
    }

    fn generate(&mut self, trace: &mut ScheduleTrace, allow_eoa: bool) -> FrameOut {
        let v = self.model.vocab();
        let logits = self.logits();
        let mut cand: Vec<usize> = (v.audio_base() as usize..v.size()).collect();
        if allow_eoa {
            cand.push(v.eoa() as usize);
        }
        let pick = self.sampling.sample(&logits, &cand, &mut self.rng) as u32;
        trace.push(Network::Backbone, 1);
        if pick == v.eoa() {
            return FrameOut::Eoa;
        }
        let first = (pick - v.audio_base()) as u16;
        FrameOut::Frame(self.decode_layers(first, trace))
    }

    fn decode_layers(&mut self, first: u16, trace: &mut ScheduleTrace) -> Vec<u16> {
        let m = self.model;
        let mut codes = vec![first];
        let mut run = DecoderRun::new(m, &self.hidden);
        let all: Vec<usize> = (0..m.cfg.n_entries).collect();
        for l in 1..m.cfg.n_layers {
            let lg = run.next(l, codes[l - 1]);
            codes.push(self.sampling.sample(&lg, &all, &mut self.rng) as u16);
            trace.push(Network::Decoder, l + 1);
        }
        codes
    }

    /// Decoder completion of a frame whose layer-1 code is given.
    pub fn complete_frame(&mut self, first: u16) -> Vec<u16> {
        self.decode_layers(first, &mut ScheduleTrace::new())
    }
}

/// The layer decoder for one frame, one position at a time: position 0 is
/// the backbone hidden state, position `l` the embedding of layer `l`'s code.
struct DecoderRun<'m> {
    m: &'m DualModel,
    caches: Vec<KvCache<f32>>,
}

impl<'m> DecoderRun<'m> {
    fn new(m: &'m DualModel, hidden: &[f32]) -> Self {
        let mut r = Self {
            m,
            caches: vec![KvCache::default(); m.net.dec_blocks.len()],
        };
        r.run(hidden, 0);
        r
    }

    fn run(&mut self, x: &[f32], pos: usize) -> Vec<f32> {
        let (p, net, dd) = (&self.m.params, &self.m.net, self.m.cfg.decoder_dim);
        let mut y = vec![0.0; dd];
        net.proj.apply_row(p, x, &mut y);
        for (b, c) in net.dec_blocks.iter().zip(self.caches.iter_mut()) {
            y = b.step(p, &y, pos, c);
        }
        let mut o = vec![0.0; dd];
        net.dec_norm.apply_row(p, &y, &mut o);
        o
    }

    /// Feeds layer `l`'s code (1-based) and returns logits for layer `l + 1`.
    fn next(&mut self, l: usize, code: u16) -> Vec<f32> {
        let (m, p, net) = (self.m, &self.m.params, &self.m.net);
        let emb = if l == 1 {
            p.get(net.tokens).row(m.vocab().audio(code) as usize)
        } else {
            p.get(net.layer_tables[l - 2]).row(code as usize)
        };
        let y = self.run(emb, l);
        let mut lg = vec![0.0; m.cfg.n_entries];
        net.dec_heads[l - 1].apply_row(p, &y, &mut lg);
        lg
    }
}

impl DualModel {
    /// Teacher-forced decoder logits for layers 2..=N of `frame`, given the
    /// backbone hidden state that predicted it.
    pub fn decoder_logits(&self, hidden: &[f32], frame: &[u16]) -> Vec<Vec<f32>> {
        let mut run = DecoderRun::new(self, hidden);
        (1..self.cfg.n_layers).map(|l| run.next(l, frame[l - 1])).collect()
    }
}

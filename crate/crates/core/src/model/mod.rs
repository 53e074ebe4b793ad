//! The dual-transformer generator: a backbone over the interleaved sequence
//! predicting layer-1 codes, and a small layer decoder filling in layers
//! 2..N of each frame from the backbone hidden state.
//!
//! Positions: rotary inside every block, plus a learned "index" embedding
//! added to backbone inputs. The index counts text tokens and audio frames
//! from the start of the current segment, which lets a frame find the text
//! token it voices without having to count.

mod delay;
mod generate;
mod train;

use std::io::{Read, Write};
use std::path::Path;

use duotts_nn::layers::{Linear, RmsNorm, TransformerBlock};
use duotts_nn::{read_checkpoint, write_params, Float, Graph, Lookup, Params, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{flatten, Flattened, InterleavedSequence, TokenKind, Vocab};

pub use delay::{apply_delay, first_frame_steps, unapply_delay, DelayedGrid};
pub use generate::{clock, FrameOut, Network, SamplingConfig, ScheduleTrace, Session, TraceRow};
pub use train::{teacher_forced_accuracy, train, Stage, TfAccuracy, TrainConfig, TrainLogRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_entries: usize,
    pub backbone_dim: usize,
    pub backbone_blocks: usize,
    pub backbone_heads: usize,
    pub backbone_ff: usize,
    pub decoder_dim: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub decoder_ff: usize,
    /// Size of the segment-index table; larger indices share the last row.
    pub max_index: usize,
    /// Backbone positional capacity used for context eviction.
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 16,
            n_entries: 2048,
            backbone_dim: 256,
            backbone_blocks: 4,
            backbone_heads: 4,
            backbone_ff: 512,
            decoder_dim: 128,
            decoder_blocks: 2,
            decoder_heads: 4,
            decoder_ff: 256,
            max_index: 256,
            max_positions: 2048,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_layers >= 1
            && self.n_entries >= 1
            && self.n_entries <= u16::MAX as usize + 1
            && self.backbone_dim % (2 * self.backbone_heads.max(1)) == 0
            && self.decoder_dim % (2 * self.decoder_heads.max(1)) == 0
            && self.backbone_heads > 0
            && self.decoder_heads > 0
            && self.max_index >= 1
            && self.max_positions >= 8;
        if !ok {
            return Err(Error::invalid(format!("bad model config {self:?}")));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_entries, self.n_layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_decoder: f64,
    pub lambda_text: f64,
    pub decoder_segment_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_decoder: 0.6,
            lambda_text: 0.01,
            decoder_segment_fraction: 1.0 / 8.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_decoder) || !(self.lambda_text >= 0.0) || !(self.decoder_segment_fraction > 0.0 && self.decoder_segment_fraction <= 1.0) {
            return Err(Error::invalid(format!("bad loss weights {self:?}")));
        }
        Ok(())
    }

    pub fn total(&self, backbone_ce: f64, decoder_ce: f64, text_ce: f64) -> f64 {
        2.0 * ((1.0 - self.lambda_decoder) * backbone_ce + self.lambda_decoder * decoder_ce) + self.lambda_text * text_ce
    }

    pub fn breakdown(&self, backbone_ce: f64, decoder_ce: f64, text_ce: f64) -> LossBreakdown {
        LossBreakdown {
            backbone_ce,
            decoder_ce,
            text_ce,
            total: self.total(backbone_ce, decoder_ce, text_ce),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub backbone_ce: f64,
    pub decoder_ce: f64,
    pub text_ce: f64,
    pub total: f64,
}

/// Which part of a sequence trains the layer decoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Subsample {
    /// Whole speech segments, uniform without replacement.
    #[default]
    Segment,
    /// Individual frames, uniform without replacement.
    Frame,
}

/// Parameter handles.
#[derive(Debug, Clone)]
pub struct Net {
    pub tokens: duotts_nn::ParamId,
    /// Tables for layers 2..N.
    pub layer_tables: Vec<duotts_nn::ParamId>,
    pub index: duotts_nn::ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: RmsNorm,
    pub head: Linear,
    pub proj: Linear,
    pub dec_blocks: Vec<TransformerBlock>,
    pub dec_norm: RmsNorm,
    /// `dec_heads[i]` predicts layer `i + 2`.
    pub dec_heads: Vec<Linear>,
}

impl Net {
    pub fn new<S: Float>(cfg: &ModelConfig, p: &mut Params<S>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = cfg.vocab();
        let (db, dd) = (cfg.backbone_dim, cfg.decoder_dim);
        let std = 0.02f64.max(1.0 / (db as f64).sqrt() * 0.5);
        let tokens = p.add_normal("embed.tokens", &[v.size(), db], std, &mut rng);
        let layer_tables = (2..=cfg.n_layers).map(|l| p.add_normal(format!("embed.layer{l}"), &[cfg.n_entries, db], std, &mut rng)).collect();
        let index = p.add_normal("embed.index", &[cfg.max_index, db], std, &mut rng);
        let blocks = (0..cfg.backbone_blocks)
            .map(|i| TransformerBlock::new(p, &format!("backbone.{i}"), db, cfg.backbone_heads, cfg.backbone_ff, &mut rng))
            .collect();
        let norm = RmsNorm::new(p, "backbone.norm", db);
        let head = Linear::new(p, "backbone.head", db, v.size(), false, &mut rng);
        let proj = Linear::new(p, "decoder.proj", db, dd, false, &mut rng);
        let dec_blocks = (0..cfg.decoder_blocks)
            .map(|i| TransformerBlock::new(p, &format!("decoder.{i}"), dd, cfg.decoder_heads, cfg.decoder_ff, &mut rng))
            .collect();
        let dec_norm = RmsNorm::new(p, "decoder.norm", dd);
        let dec_heads = (2..=cfg.n_layers).map(|l| Linear::new(p, &format!("decoder.head{l}"), dd, cfg.n_entries, false, &mut rng)).collect();
        Self {
            tokens,
            layer_tables,
            index,
            blocks,
            norm,
            head,
            proj,
            dec_blocks,
            dec_norm,
            dec_heads,
        }
    }
}

/// Tracks the segment index of each incoming backbone token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IndexCounter {
    text: usize,
    frames: usize,
}

impl IndexCounter {
    pub fn next(&mut self, kind: TokenKind) -> usize {
        match kind {
            TokenKind::Speaker(_) => {
                *self = Self::default();
                0
            }
            TokenKind::Text(_) => {
                self.text += 1;
                self.text - 1
            }
            TokenKind::Audio(_) => {
                self.frames += 1;
                self.frames - 1
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DualModel {
    pub cfg: ModelConfig,
    pub params: Params<f32>,
    pub net: Net,
    /// Last curriculum stage completed, if any.
    pub stage: Option<Stage>,
}

/// One row of backbone input: the id and, for audio, the full frame.
pub(crate) struct BackboneInput<'a> {
    pub id: u32,
    pub frame: Option<&'a [u16]>,
    pub index: usize,
}

/// Backbone inputs for a flattened sequence: BOS, then every id but the last.
pub(crate) fn backbone_inputs<'a>(flat: &'a Flattened, v: &Vocab) -> Result<Vec<BackboneInput<'a>>> {
    let mut out = Vec::with_capacity(flat.len());
    out.push(BackboneInput {
        id: v.bos(),
        frame: None,
        index: 0,
    });
    let mut counter = IndexCounter::default();
    for i in 0..flat.len().saturating_sub(1) {
        out.push(BackboneInput {
            id: flat.ids[i],
            frame: flat.frames[i].as_deref(),
            index: counter.next(v.kind(flat.ids[i])?),
        });
    }
    Ok(out)
}

/// Per-sequence targets split by loss term.
struct Targets {
    audio_rows: Vec<usize>,
    audio_ids: Vec<usize>,
    text_rows: Vec<usize>,
    text_ids: Vec<usize>,
    /// Row of each frame target and its segment number.
    frames: Vec<(usize, usize)>,
}

fn targets(flat: &Flattened, v: &Vocab, offset: usize) -> Result<Targets> {
    let mut t = Targets {
        audio_rows: vec![],
        audio_ids: vec![],
        text_rows: vec![],
        text_ids: vec![],
        frames: vec![],
    };
    let mut seg = 0usize;
    for (i, &id) in flat.ids.iter().enumerate() {
        let kind = v.kind(id)?;
        match kind {
            TokenKind::Audio(_) => {
                t.audio_rows.push(offset + i);
                t.audio_ids.push(id as usize);
                t.frames.push((offset + i, seg));
            }
            TokenKind::Eoa => {
                t.audio_rows.push(offset + i);
                t.audio_ids.push(id as usize);
                seg += 1;
            }
            TokenKind::Text(_) | TokenKind::Speaker(_) | TokenKind::Eot => {
                t.text_rows.push(offset + i);
                t.text_ids.push(id as usize);
            }
            TokenKind::Bos | TokenKind::Pad => {}
        }
    }
    Ok(t)
}

/// Graph values of one teacher-forced pass.
pub struct ForwardVars {
    pub backbone_ce: Var,
    pub decoder_ce: Var,
    pub text_ce: Var,
    pub total: Var,
    /// Backbone logits, one row per position.
    pub logits: Var,
}

/// Chooses the frames that train the layer decoder.
pub fn sample_decoder_frames(frames: &[(usize, usize)], fraction: f64, mode: Subsample, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if frames.is_empty() {
        return vec![];
    }
    match mode {
        Subsample::Segment => {
            let mut segs: Vec<usize> = frames.iter().map(|f| f.1).collect();
            segs.dedup();
            let k = ((fraction * segs.len() as f64).ceil() as usize).clamp(1, segs.len());
            let mut chosen: Vec<usize> = sample(rng, segs.len(), k).into_iter().map(|i| segs[i]).collect();
            chosen.sort_unstable();
            frames.iter().filter(|f| chosen.binary_search(&f.1).is_ok()).map(|f| f.0).collect()
        }
        Subsample::Frame => {
            let k = ((fraction * frames.len() as f64).ceil() as usize).clamp(1, frames.len());
            let mut chosen: Vec<usize> = sample(rng, frames.len(), k).into_iter().map(|i| frames[i].0).collect();
            chosen.sort_unstable();
            chosen
        }
    }
}

/// Teacher-forced weighted loss over a batch of flattened sequences packed into one
/// graph. Cross-entropies are means over all contributing targets.
pub fn forward_graph<S: Float>(
    cfg: &ModelConfig,
    net: &Net,
    p: &Params<S>,
    g: &mut Graph<S>,
    batch: &[Flattened],
    w: &LossWeights,
    mode: Subsample,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardVars> {
    let v = cfg.vocab();
    let n = cfg.n_layers;
    let mut lookups = vec![];
    let mut positions = vec![];
    let mut blocks = vec![];
    let (mut audio_rows, mut audio_ids, mut text_rows, mut text_ids, mut dec_rows) = (vec![], vec![], vec![], vec![], vec![]);
    let mut dec_frames: Vec<&[u16]> = vec![];
    let mut row = 0usize;
    let inv_n = S::from_f64(1.0 / n as f64);
    let index_table = n;
    for flat in batch {
        if !flat.ids.iter().any(|id| v.is_audio(*id)) {
            return Err(Error::invalid("sequence has no audio frames"));
        }
        let inputs = backbone_inputs(flat, &v)?;
        for (i, x) in inputs.iter().enumerate() {
            let pos = row + i;
            match x.frame {
                Some(codes) => {
                    lookups.push(Lookup { pos, table: 0, row: x.id as usize, weight: inv_n });
                    for (l, c) in codes.iter().enumerate().skip(1) {
                        lookups.push(Lookup { pos, table: l, row: *c as usize, weight: inv_n });
                    }
                }
                None => lookups.push(Lookup { pos, table: 0, row: x.id as usize, weight: S::one() }),
            }
            lookups.push(Lookup {
                pos,
                table: index_table,
                row: x.index.min(cfg.max_index - 1),
                weight: S::one(),
            });
            positions.push(i);
        }
        blocks.push((row, inputs.len()));
        let t = targets(flat, &v, row)?;
        audio_rows.extend(t.audio_rows);
        audio_ids.extend(t.audio_ids);
        text_rows.extend(t.text_rows);
        text_ids.extend(t.text_ids);
        let chosen = sample_decoder_frames(&t.frames, w.decoder_segment_fraction, mode, rng);
        for r in chosen {
            dec_rows.push(r);
            dec_frames.push(flat.frames[r - row].as_deref().expect("audio target carries a frame"));
        }
        row += inputs.len();
    }
    let mut tables = vec![g.param(p, net.tokens)];
    tables.extend(net.layer_tables.iter().map(|id| g.param(p, *id)));
    tables.push(g.param(p, net.index));
    let mut x = g.embed_sum(&tables, lookups, row);
    for b in &net.blocks {
        x = b.forward(g, p, x, &positions, &blocks);
    }
    let h = net.norm.forward(g, p, x);
    let logits = net.head.forward(g, p, h);
    let al = g.select_rows(logits, &audio_rows);
    let backbone_ce = g.cross_entropy(al, &audio_ids);
    let tl = g.select_rows(logits, &text_rows);
    let text_ce = g.cross_entropy(tl, &text_ids);

    let decoder_ce = if n > 1 && !dec_rows.is_empty() {
        let k = dec_rows.len();
        let hsel = g.select_rows(h, &dec_rows);
        let mut code_lookups = vec![];
        for (i, codes) in dec_frames.iter().enumerate() {
            for l in 1..n {
                // decoder input position l carries layer l (1-based), i.e. codes[l - 1]
                let (table, r) = if l == 1 { (0, v.audio(codes[0]) as usize) } else { (l - 1, codes[l - 1] as usize) };
                code_lookups.push(Lookup {
                    pos: i * (n - 1) + l - 1,
                    table,
                    row: r,
                    weight: S::one(),
                });
            }
        }
        let emb = g.embed_sum(&tables[..n], code_lookups, k * (n - 1));
        let stacked = g.concat_rows(&[hsel, emb]);
        let order: Vec<usize> = (0..k).flat_map(|i| std::iter::once(i).chain((0..n - 1).map(move |l| k + i * (n - 1) + l))).collect();
        let seq = g.select_rows(stacked, &order);
        let mut y = net.proj.forward(g, p, seq);
        let dpos: Vec<usize> = (0..k).flat_map(|_| 0..n).collect();
        let dblocks: Vec<(usize, usize)> = (0..k).map(|i| (i * n, n)).collect();
        for b in &net.dec_blocks {
            y = b.forward(g, p, y, &dpos, &dblocks);
        }
        let y = net.dec_norm.forward(g, p, y);
        let mut acc: Option<Var> = None;
        for l in 1..n {
            let rows: Vec<usize> = (0..k).map(|i| i * n + l).collect();
            let tg: Vec<usize> = dec_frames.iter().map(|c| c[l] as usize).collect();
            let yl = g.select_rows(y, &rows);
            let lg = net.dec_heads[l - 1].forward(g, p, yl);
            let ce = g.cross_entropy(lg, &tg);
            acc = Some(match acc {
                Some(a) => g.add(a, ce),
                None => ce,
            });
        }
        g.scale(acc.expect("n > 1"), S::from_f64(1.0 / (n - 1) as f64))
    } else {
        g.constant(duotts_nn::Tensor::scalar(S::zero()))
    };

    let wb = g.scale(backbone_ce, S::from_f64(2.0 * (1.0 - w.lambda_decoder)));
    let wd = g.scale(decoder_ce, S::from_f64(2.0 * w.lambda_decoder));
    let wt = g.scale(text_ce, S::from_f64(w.lambda_text));
    let s = g.add(wb, wd);
    let total = g.add(s, wt);
    Ok(ForwardVars {
        backbone_ce,
        decoder_ce,
        text_ce,
        total,
        logits,
    })
}

impl DualModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let net = Net::new(cfg, &mut params, seed);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            net,
            stage: None,
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.cfg.vocab()
    }

    /// Weighted loss on one sequence, decoder frames sampled with `seed`.
    pub fn forward_teacher_forced(&self, seq: &InterleavedSequence, w: &LossWeights, seed: u64, mode: Subsample) -> Result<LossBreakdown> {
        w.validate()?;
        if seq.n_audio_segments() == 0 {
            return Err(Error::invalid("sequence has no audio segment"));
        }
        let flat = flatten(seq, &self.vocab())?;
        let mut g = Graph::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = forward_graph(&self.cfg, &self.net, &self.params, &mut g, &[flat], w, mode, &mut rng)?;
        let val = |v: Var| g.value(v).item() as f64;
        Ok(w.breakdown(val(f.backbone_ce), val(f.decoder_ce), val(f.text_ce)))
    }

    /// Teacher-forced backbone logits, one row per flattened position.
    pub fn backbone_logits(&self, flat: &Flattened) -> Result<duotts_nn::Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = forward_graph(&self.cfg, &self.net, &self.params, &mut g, std::slice::from_ref(flat), &LossWeights::default(), Subsample::Segment, &mut rng)?;
        Ok(g.value(f.logits).clone())
    }

    fn metadata(&self) -> String {
        serde_json::json!({"kind": "dual", "config": self.cfg, "stage": self.stage}).to_string()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_params(w, &self.metadata(), &self.params, &[])?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut ck = read_checkpoint(r)?;
        let meta: serde_json::Value = serde_json::from_str(&ck.metadata).map_err(|e| Error::Format(format!("model metadata: {e}")))?;
        if meta["kind"] != "dual" {
            return Err(Error::Format("checkpoint is not a dual-transformer model".into()));
        }
        let cfg: ModelConfig = serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Format(format!("model config: {e}")))?;
        let mut m = Self::new(&cfg, 0)?;
        ck.load_into(&mut m.params)?;
        m.stage = serde_json::from_value(meta["stage"].clone()).map_err(|e| Error::Format(format!("model stage: {e}")))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut f)?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests;

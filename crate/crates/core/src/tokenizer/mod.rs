//! Speech tokenizer: log-filterbank encoder with the frozen teacher
//! concatenated in, 4x downsampling, the RVQ bottleneck, a semantic branch,
//! and an oscillator-bank acoustic decoder that can run chunk by chunk.

mod train;

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use duotts_nn::layers::{GatedConv, Linear, Taps};
use duotts_nn::{read_checkpoint, write_params, Graph, Params, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioSignal, SAMPLE_RATE};
use crate::dsp::{Filterbank, OscillatorBank, Real};
use crate::error::{Error, Result};
use crate::frontend::{normalize_fbank, Downsample4, FrontendConfig, Teacher, Upsample4, RATE_RATIO};
use crate::rvq::{CodebookSet, TokenGrid};

pub(crate) use train::Batches;
pub use train::{
    prepare, recon_error, train_stage1, train_stage2, utterance_loss, Prepared, Quant, TokenizerLogRow, TokenizerLosses, TokenizerTrainConfig,
    UttLoss,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub frontend: FrontendConfig,
    pub hidden: usize,
    pub kernel: usize,
    pub n_blocks: usize,
    pub acoustic_dim: usize,
    pub adapter_dim: usize,
    pub n_layers: usize,
    pub n_entries: usize,
    pub synth_grid_hz: f64,
    pub synth_lo_hz: f64,
    pub synth_hi_hz: f64,
    /// Weight of the log-filterbank L1 term relative to the sample L1.
    pub fbank_loss_weight: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            hidden: 128,
            kernel: 3,
            n_blocks: 2,
            acoustic_dim: 64,
            adapter_dim: 32,
            n_layers: 16,
            n_entries: 2048,
            synth_grid_hz: 5.0,
            synth_lo_hz: 100.0,
            synth_hi_hz: 7500.0,
            fbank_loss_weight: 0.1,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        if self.hidden == 0 || self.kernel == 0 || self.n_layers == 0 || self.acoustic_dim == 0 {
            return Err(Error::invalid("tokenizer sizes must be positive"));
        }
        if !self.n_entries.is_power_of_two() || self.n_entries > 1 << 16 {
            return Err(Error::invalid(format!("n_entries {} must be a power of two up to 65536", self.n_entries)));
        }
        let period = SAMPLE_RATE as f64 / self.synth_grid_hz;
        if period.fract() != 0.0 || !(self.synth_lo_hz > 0.0 && self.synth_hi_hz < SAMPLE_RATE as f64 / 2.0) {
            return Err(Error::invalid("synth grid must divide the sample rate and stay below Nyquist"));
        }
        Ok(())
    }

    pub fn oscillator_bank(&self) -> OscillatorBank {
        OscillatorBank::new(SAMPLE_RATE, self.frontend.hop_samples, self.synth_grid_hz, self.synth_lo_hz, self.synth_hi_hz)
    }
}

/// Layer handles; parameters live in [`TokenizerModel::params`].
#[derive(Debug, Clone)]
pub struct Net {
    pub enc_in: Linear,
    pub enc_blocks: Vec<GatedConv>,
    pub enc_out: Linear,
    pub adapter: Linear,
    pub down: Downsample4,
    pub up: Upsample4,
    pub sem_in: Linear,
    pub sem_blocks: Vec<GatedConv>,
    pub sem_out: Linear,
    pub dec_in: Linear,
    pub dec_blocks: Vec<GatedConv>,
    pub dec_out: Linear,
}

fn blocks(p: &mut Params<f32>, name: &str, cfg: &TokenizerConfig, taps: Taps, rng: &mut ChaCha8Rng) -> Vec<GatedConv> {
    (0..cfg.n_blocks)
        .map(|i| GatedConv::new(p, &format!("{name}.block{i}"), cfg.hidden, cfg.kernel, 1 << i, taps, rng))
        .collect()
}

fn run_blocks<S: Real>(g: &mut Graph<S>, p: &Params<S>, blocks: &[GatedConv], mut x: Var) -> Var {
    for b in blocks {
        x = b.forward(g, p, x);
    }
    x
}

impl Net {
    fn new(p: &mut Params<f32>, cfg: &TokenizerConfig, rng: &mut ChaCha8Rng) -> Self {
        let fe = &cfg.frontend;
        let h = cfg.hidden;
        let n_coeffs = cfg.oscillator_bank().n_coeffs();
        let enc_in = Linear::new(p, "encoder.in", fe.n_filters, h, true, rng);
        let enc_blocks = blocks(p, "encoder", cfg, Taps::Causal, rng);
        let enc_out = Linear::new(p, "encoder.out", h, cfg.acoustic_dim, true, rng);
        let adapter = Linear::new(p, "adapter", fe.teacher_dim, cfg.adapter_dim, true, rng);
        let down = Downsample4::new(p, "down", cfg.acoustic_dim + cfg.adapter_dim, fe.d_latent, rng);
        let up = Upsample4::new(p, "up", fe.d_latent, fe.d_latent, rng);
        let sem_in = Linear::new(p, "semantic.in", fe.d_latent, h, true, rng);
        let sem_blocks = blocks(p, "semantic", cfg, Taps::Causal, rng);
        let sem_out = Linear::new(p, "semantic.out", h, fe.teacher_dim, true, rng);
        let dec_in = Linear::new(p, "decoder.in", fe.d_latent, h, true, rng);
        let dec_blocks = blocks(p, "decoder", cfg, Taps::Centered, rng);
        let dec_out = Linear::new(p, "decoder.out", h, n_coeffs, true, rng);
        // Start from silence; a random oscillator bank is broadband noise.
        p.get_mut(dec_out.w).data_mut().fill(0.0);
        Self {
            enc_in,
            enc_blocks,
            enc_out,
            adapter,
            down,
            up,
            sem_in,
            sem_blocks,
            sem_out,
            dec_in,
            dec_blocks,
            dec_out,
        }
    }

    /// Pre-quantization latent `[ceil(T/4), d_latent]`.
    pub fn encode_graph<S: Real>(&self, g: &mut Graph<S>, p: &Params<S>, fbank_norm: Var, teacher: Var) -> Var {
        let h = self.enc_in.forward(g, p, fbank_norm);
        let h = run_blocks(g, p, &self.enc_blocks, h);
        let a = self.enc_out.forward(g, p, h);
        let s = self.adapter.forward(g, p, teacher);
        let cat = g.concat_cols(&[a, s]);
        self.down.forward(g, p, cat)
    }

    pub fn semantic_graph<S: Real>(&self, g: &mut Graph<S>, p: &Params<S>, up: Var) -> Var {
        let h = self.sem_in.forward(g, p, up);
        let h = run_blocks(g, p, &self.sem_blocks, h);
        self.sem_out.forward(g, p, h)
    }

    /// Oscillator coefficients for 50 Hz features `up`.
    pub fn decoder_graph<S: Real>(&self, g: &mut Graph<S>, p: &Params<S>, up: Var) -> Var {
        let h = self.dec_in.forward(g, p, up);
        let h = run_blocks(g, p, &self.dec_blocks, h);
        self.dec_out.forward(g, p, h)
    }

    pub fn encode_latent(&self, p: &Params<f32>, fbank_norm: &Tensor<f32>, teacher: &Tensor<f32>) -> Tensor<f32> {
        let t = fbank_norm.rows();
        let mut h = self.enc_in.apply(p, fbank_norm);
        for b in &self.enc_blocks {
            h = b.apply_range(p, &h, 0, 0, t);
        }
        let a = self.enc_out.apply(p, &h);
        let s = self.adapter.apply(p, teacher);
        let (da, ds) = (a.cols(), s.cols());
        let mut cat = Tensor::zeros(&[t, da + ds]);
        for r in 0..t {
            let row = cat.row_mut(r);
            row[..da].copy_from_slice(a.row(r));
            row[da..].copy_from_slice(s.row(r));
        }
        self.down.apply(p, &cat)
    }
}

/// Trained tokenizer: parameters, codebooks and decoder mode.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    pub cfg: TokenizerConfig,
    pub params: Params<f32>,
    pub net: Net,
    pub codebooks: CodebookSet,
    pub streaming: bool,
    filterbank: Arc<Filterbank>,
    bank: OscillatorBank,
    teacher: Teacher,
}

impl TokenizerModel {
    /// Freshly initialised stage-1 model (centred decoder taps).
    pub fn new(cfg: &TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let net = Net::new(&mut params, cfg, &mut rng);
        let codebooks = CodebookSet::random(cfg.n_layers, cfg.n_entries, cfg.frontend.d_latent, 0.1, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            net,
            codebooks,
            streaming: false,
            filterbank: Arc::new(cfg.frontend.filterbank()),
            bank: cfg.oscillator_bank(),
            teacher: Teacher::new(&cfg.frontend),
        })
    }

    pub fn filterbank(&self) -> &Arc<Filterbank> {
        &self.filterbank
    }

    pub fn oscillator_bank(&self) -> &OscillatorBank {
        &self.bank
    }

    /// Switches the acoustic decoder to left-only taps of the same span.
    pub fn set_streaming(&mut self) {
        for b in &mut self.net.dec_blocks {
            let k = b.offsets.len() as isize;
            let d = if k > 1 { b.offsets[1] - b.offsets[0] } else { 1 };
            b.offsets = (0..k).map(|i| -(k - 1 - i) * d).collect();
        }
        self.streaming = true;
    }

    /// Decoder history needed per emitted feature frame.
    pub fn decoder_left_context(&self) -> usize {
        self.net.dec_blocks.iter().map(|b| b.left_context()).sum()
    }

    /// Raw log-filterbank frames and teacher features.
    pub fn features(&self, audio: &AudioSignal) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if audio.is_empty() {
            return Err(Error::invalid("empty audio"));
        }
        if audio.sample_rate != SAMPLE_RATE {
            return Err(Error::invalid(format!("expected {SAMPLE_RATE} Hz audio, got {}", audio.sample_rate)));
        }
        let fb = self.filterbank.log_energies(&audio.samples);
        let teacher = self.teacher.apply(&fb);
        Ok((fb, teacher))
    }

    pub fn teacher(&self) -> &Teacher {
        &self.teacher
    }

    pub fn latent(&self, audio: &AudioSignal) -> Result<Tensor<f32>> {
        let (fb, teacher) = self.features(audio)?;
        Ok(self.net.encode_latent(&self.params, &normalize_fbank(&fb), &teacher))
    }

    pub fn encode(&self, audio: &AudioSignal) -> Result<TokenGrid> {
        Ok(self.codebooks.quantize_frames(&self.latent(audio)?)?.grid)
    }

    fn check_grid(&self, g: &TokenGrid) -> Result<()> {
        if g.n_frames == 0 {
            return Err(Error::invalid("empty token grid"));
        }
        Ok(())
    }

    /// Full decode truncated to `n_samples` (at most `4 * 320` per frame).
    pub fn decode(&self, g: &TokenGrid, n_samples: usize) -> Result<AudioSignal> {
        self.check_grid(g)?;
        let max = g.n_frames * RATE_RATIO * self.cfg.frontend.hop_samples;
        if n_samples > max {
            return Err(Error::invalid(format!("{n_samples} samples requested from {} frames (max {max})", g.n_frames)));
        }
        let mut dec = StreamingDecoder::new(self);
        let mut samples = dec.push(g)?;
        samples.truncate(n_samples);
        Ok(AudioSignal::new(samples))
    }

    /// Samples produced by a full decode of `n_frames` token frames.
    pub fn samples_for(&self, n_frames: usize) -> usize {
        n_frames * RATE_RATIO * self.cfg.frontend.hop_samples
    }

    /// One chunk per `chunk_frames` token frames; concatenated, equal to
    /// `decode(g, samples_for(g.n_frames))`.
    pub fn stream_decode(&self, g: &TokenGrid, chunk_frames: usize) -> Result<Vec<AudioSignal>> {
        self.check_grid(g)?;
        if chunk_frames == 0 {
            return Err(Error::invalid("chunk_frames must be positive"));
        }
        let mut dec = self.streaming_decoder()?;
        let mut out = vec![];
        let mut start = 0;
        while start < g.n_frames {
            let end = (start + chunk_frames).min(g.n_frames);
            out.push(AudioSignal::new(dec.push(&g.slice(start, end))?));
            start = end;
        }
        Ok(out)
    }

    pub fn streaming_decoder(&self) -> Result<StreamingDecoder<'_>> {
        if !self.streaming {
            return Err(Error::invalid("stream_decode needs the streaming (stage-2) decoder"));
        }
        Ok(StreamingDecoder::new(self))
    }

    fn metadata(&self) -> String {
        serde_json::json!({
            "kind": "tokenizer",
            "config": self.cfg,
            "streaming": self.streaming,
            "rvq_decay": self.codebooks.decay,
        })
        .to_string()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let (v, c, s) = self.codebooks.parts();
        write_params(w, &self.metadata(), &self.params, &[("rvq.vectors", &v), ("rvq.ema_counts", &c), ("rvq.ema_sums", &s)])?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut ck = read_checkpoint(r)?;
        let meta: serde_json::Value = serde_json::from_str(&ck.metadata).map_err(|e| Error::Format(format!("tokenizer metadata: {e}")))?;
        if meta["kind"] != "tokenizer" {
            return Err(Error::Format("checkpoint is not a tokenizer".into()));
        }
        let cfg: TokenizerConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Format(format!("tokenizer config: {e}")))?;
        let mut m = Self::new(&cfg, 0)?;
        ck.load_into(&mut m.params)?;
        let v = ck.take("rvq.vectors")?;
        let shape = [v.shape()[0], v.shape()[1], v.shape()[2]];
        let decay = meta["rvq_decay"].as_f64().unwrap_or(crate::rvq::DEFAULT_DECAY as f64) as f32;
        m.codebooks = CodebookSet::from_parts(shape, v.into_vec(), ck.take("rvq.ema_counts")?.into_vec(), ck.take("rvq.ema_sums")?.into_vec(), decay)?;
        if meta["streaming"].as_bool() == Some(true) {
            m.set_streaming();
        }
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

/// Incremental acoustic decoder. Each block keeps the trailing input rows
/// it needs as left context, so pushing a grid in pieces gives the same
/// samples as pushing it whole.
pub struct StreamingDecoder<'a> {
    model: &'a TokenizerModel,
    history: Vec<Tensor<f32>>,
    frames: usize,
}

impl<'a> StreamingDecoder<'a> {
    fn new(model: &'a TokenizerModel) -> Self {
        let h = model.cfg.hidden;
        Self {
            model,
            history: vec![Tensor::zeros(&[0, h]); model.net.dec_blocks.len()],
            frames: 0,
        }
    }

    /// Feature frames emitted so far.
    pub fn frames_done(&self) -> usize {
        self.frames
    }

    /// Decodes the next token frames into `4 * 320` samples each.
    pub fn push(&mut self, codes: &TokenGrid) -> Result<Vec<f32>> {
        let m = self.model;
        let p = &m.params;
        let q = m.codebooks.dequantize(codes)?;
        let n = codes.n_frames * RATE_RATIO;
        let up = m.net.up.apply(p, &q, n)?;
        let mut h = m.net.dec_in.apply(p, &up);
        for (b, block) in m.net.dec_blocks.iter().enumerate() {
            let hist = &self.history[b];
            let mut data = hist.data().to_vec();
            data.extend_from_slice(h.data());
            let x = Tensor::from_vec(&[hist.rows() + n, m.cfg.hidden], data);
            let x_start = self.frames - hist.rows();
            let out = block.apply_range(p, &x, x_start, self.frames, self.frames + n);
            let keep = block.left_context().min(x.rows());
            let rows = x.rows();
            self.history[b] = Tensor::from_vec(&[keep, m.cfg.hidden], x.data()[(rows - keep) * m.cfg.hidden..].to_vec());
            h = out;
        }
        let coeffs = m.net.dec_out.apply(p, &h);
        let samples = m.bank.synth(&coeffs, self.frames);
        self.frames += n;
        Ok(samples)
    }
}

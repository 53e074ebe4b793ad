use duotts_nn::{Adam, Graph, Params, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TokenizerConfig, TokenizerModel};
use crate::audio::AudioSignal;
use crate::dsp::{lit, Real};
use crate::error::{Error, Result};
use crate::frontend::normalize_fbank;
use crate::rvq::{straight_through, TokenGrid, COMMIT_BETA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_sem: f64,
    pub beta: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Steps trained without the bottleneck before the codebooks are
    /// seeded from the encoder outputs.
    pub quantizer_warmup: usize,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            lambda_sem: 1.0,
            beta: COMMIT_BETA,
            seed: 0,
            log_every: 50,
            quantizer_warmup: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizerLosses {
    pub recon: f64,
    pub semantic: f64,
    pub commit: f64,
    /// Slot for a perceptual term; always 0 here.
    pub perceptual: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerLogRow {
    pub step: usize,
    pub stage: u8,
    #[serde(flatten)]
    pub losses: TokenizerLosses,
}

/// Per-utterance inputs, computed once.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Target samples zero-padded to a whole number of hops.
    pub audio: Vec<f32>,
    pub fbank: Tensor<f32>,
    pub fbank_norm: Tensor<f32>,
    pub teacher: Tensor<f32>,
}

impl Prepared {
    pub fn n_feature_frames(&self) -> usize {
        self.fbank.rows()
    }
}

pub fn prepare(m: &TokenizerModel, audio: &AudioSignal) -> Result<Prepared> {
    let (fbank, teacher) = m.features(audio)?;
    let mut samples = audio.samples.clone();
    samples.resize(fbank.rows() * m.cfg.frontend.hop_samples, 0.0);
    Ok(Prepared {
        audio: samples,
        fbank_norm: normalize_fbank(&fbank),
        fbank,
        teacher,
    })
}

/// How the bottleneck is crossed in a training graph.
pub enum Quant<'a, S> {
    /// No bottleneck: the latent goes straight to the decoders.
    Bypass,
    /// Nearest-neighbour search now, straight-through gradient.
    Live,
    /// `z + offset` with commitment towards `target`: a fixed, smooth
    /// stand-in for the quantizer, used for finite-difference checks.
    Frozen { offset: &'a Tensor<S>, target: &'a Tensor<S> },
}

pub struct UttLoss<S> {
    pub recon: Var,
    pub semantic: Var,
    pub commit: Var,
    pub total: Var,
    pub latent: Tensor<f32>,
    pub grid: Option<TokenGrid>,
    /// `quantized - latent` and `quantized` at this evaluation.
    pub offset: Tensor<S>,
    pub target: Tensor<S>,
}

fn mean_abs<S: Real>(g: &mut Graph<S>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

/// L1 on samples plus weighted L1 on log-filterbank frames.
fn recon_graph<S: Real>(g: &mut Graph<S>, m: &TokenizerModel, coeffs: Var, prep: &Prepared) -> Var {
    let (value, op) = m.oscillator_bank().op(g.value(coeffs), 0);
    let y = g.custom(&[coeffs], value, op);
    let target = g.constant(Tensor::from_vec(&[prep.audio.len()], prep.audio.iter().map(|v| lit::<S>(*v as f64)).collect()));
    let wav = mean_abs(g, y, target);
    let (value, op) = m.filterbank().op(g.value(y).data());
    let fy = g.custom(&[y], value, op);
    let fx = g.constant(prep.fbank.cast());
    let spec = mean_abs(g, fy, fx);
    let spec = g.scale(spec, lit(m.cfg.fbank_loss_weight));
    g.add(wav, spec)
}

/// Builds the stage-1 loss of one utterance into `g`.
pub fn utterance_loss<S: Real>(
    g: &mut Graph<S>,
    p: &Params<S>,
    m: &TokenizerModel,
    prep: &Prepared,
    quant: Quant<'_, S>,
    lambda_sem: f64,
    beta: f64,
) -> Result<UttLoss<S>> {
    let net = &m.net;
    let fx = g.constant(prep.fbank_norm.cast());
    let tx = g.constant(prep.teacher.cast());
    let z = net.encode_graph(g, p, fx, tx);
    let latent: Tensor<f32> = g.value(z).cast();
    let (q, commit, grid, target) = match quant {
        Quant::Live => {
            let qz = m.codebooks.quantize_frames(&latent)?;
            let target: Tensor<S> = qz.quantized.cast();
            let (q, commit) = straight_through(g, z, target.clone(), beta);
            (q, commit, Some(qz.grid), target)
        }
        Quant::Bypass => {
            let zero = g.constant(Tensor::scalar(S::zero()));
            (z, zero, None, g.value(z).clone())
        }
        Quant::Frozen { offset, target } => {
            let c = g.constant(offset.clone());
            let q = g.add(z, c);
            let tv = g.constant(target.clone());
            let d = g.sub(z, tv);
            let d = g.square(d);
            let d = g.mean(d);
            (q, g.scale(d, lit(beta)), None, target.clone())
        }
    };
    let offset = {
        let (qv, zv) = (g.value(q).data(), g.value(z).data());
        Tensor::from_vec(g.value(z).shape(), qv.iter().zip(zv).map(|(a, b)| *a - *b).collect())
    };

    let t_feat = prep.n_feature_frames();
    let up = net.up.forward(g, p, q, t_feat)?;
    let sem = net.semantic_graph(g, p, up);
    let teach = g.constant(prep.teacher.cast());
    let sd = g.sub(sem, teach);
    let sd = g.square(sd);
    let semantic = g.mean(sd);

    let coeffs = net.decoder_graph(g, p, up);
    let recon = recon_graph(g, m, coeffs, prep);

    let perceptual = g.constant(Tensor::scalar(S::zero()));
    let ws = g.scale(semantic, lit(lambda_sem));
    let total = g.add(recon, ws);
    let total = g.add(total, commit);
    let total = g.add(total, perceptual);
    Ok(UttLoss {
        recon,
        semantic,
        commit,
        total,
        latent,
        grid,
        offset,
        target,
    })
}

fn check_corpus(corpus: &[AudioSignal]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid("tokenizer training needs a nonempty corpus"));
    }
    Ok(())
}

/// Cycles through shuffled epochs, `size` indices at a time.
pub(crate) struct Batches {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

/// Stage 1: non-streaming decoder, everything trainable, EMA codebooks
/// seeded by k-means++ from the initial encoder outputs.
pub fn train_stage1(corpus: &[AudioSignal], cfg: &TokenizerConfig, tc: &TokenizerTrainConfig) -> Result<(TokenizerModel, Vec<TokenizerLogRow>)> {
    check_corpus(corpus)?;
    let mut m = TokenizerModel::new(cfg, tc.seed)?;
    let preps = corpus.iter().map(|a| prepare(&m, a)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let d = cfg.frontend.d_latent;
    let mut adam = Adam::new(&m.params, tc.lr);
    let mut batches = Batches::new(preps.len(), tc.seed.wrapping_add(2));
    let mut log = vec![];
    for step in 0..tc.steps {
        if step == tc.quantizer_warmup {
            seed_codebooks(&mut m, &preps, &mut rng)?;
        }
        let live = step >= tc.quantizer_warmup;
        let idx = batches.next(tc.batch_size);
        let mut g = Graph::<f32>::new();
        let mut parts = vec![];
        let mut latents = vec![];
        let mut grid: Option<TokenGrid> = None;
        for &i in &idx {
            let quant = if live { Quant::Live } else { Quant::Bypass };
            let u = utterance_loss(&mut g, &m.params, &m, &preps[i], quant, tc.lambda_sem, tc.beta)?;
            latents.extend_from_slice(u.latent.data());
            if let Some(ug) = &u.grid {
                grid = Some(match grid {
                    Some(prev) => prev.concat(ug),
                    None => ug.clone(),
                });
            }
            parts.push(u);
        }
        let inv = 1.0 / idx.len() as f32;
        let sum = |g: &mut Graph<f32>, f: &dyn Fn(&UttLoss<f32>) -> Var| {
            let mut acc = f(&parts[0]);
            for u in &parts[1..] {
                acc = g.add(acc, f(u));
            }
            g.scale(acc, inv)
        };
        let total = sum(&mut g, &|u| u.total);
        let recon = sum(&mut g, &|u| u.recon);
        let semantic = sum(&mut g, &|u| u.semantic);
        let commit = sum(&mut g, &|u| u.commit);
        let losses = TokenizerLosses {
            recon: scalar(&g, recon),
            semantic: scalar(&g, semantic),
            commit: scalar(&g, commit),
            perceptual: 0.0,
            total: scalar(&g, total),
        };
        if !losses.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = g.backward(total);
        adam.step(&mut m.params, &grads);
        if let Some(grid) = grid {
            m.codebooks.ema_update(&Tensor::from_vec(&[grid.n_frames, d], latents), &grid, &mut rng)?;
        }
        log.push(TokenizerLogRow { step, stage: 1, losses });
    }
    if tc.quantizer_warmup >= tc.steps {
        seed_codebooks(&mut m, &preps, &mut rng)?;
    }
    Ok((m, log))
}

/// k-means++ over the current encoder outputs of the whole corpus.
fn seed_codebooks(m: &mut TokenizerModel, preps: &[Prepared], rng: &mut ChaCha8Rng) -> Result<()> {
    let mut init = vec![];
    for p in preps {
        init.extend_from_slice(m.net.encode_latent(&m.params, &p.fbank_norm, &p.teacher).data());
    }
    let d = m.cfg.frontend.d_latent;
    m.codebooks.init_kmeanspp(&Tensor::from_vec(&[init.len() / d, d], init), rng)
}

/// Stage 2: left-only decoder taps; only `decoder.*` is trained, on
/// features from the frozen encoder and codebooks.
pub fn train_stage2(stage1: &TokenizerModel, corpus: &[AudioSignal], tc: &TokenizerTrainConfig) -> Result<(TokenizerModel, Vec<TokenizerLogRow>)> {
    check_corpus(corpus)?;
    let mut m = stage1.clone();
    m.set_streaming();
    for id in m.params.ids().collect::<Vec<_>>() {
        let on = m.params.name(id).starts_with("decoder.");
        m.params.set_trainable(id, on);
    }
    let mut inputs = vec![];
    for a in corpus {
        let prep = prepare(&m, a)?;
        let grid = m.encode(a)?;
        let q = m.codebooks.dequantize(&grid)?;
        let up = m.net.up.apply(&m.params, &q, prep.n_feature_frames())?;
        inputs.push((prep, up));
    }
    let mut adam = Adam::new(&m.params, tc.lr);
    let mut batches = Batches::new(inputs.len(), tc.seed.wrapping_add(3));
    let mut log = vec![];
    for step in 0..tc.steps {
        let idx = batches.next(tc.batch_size);
        let mut g = Graph::<f32>::new();
        let mut acc: Option<Var> = None;
        for &i in &idx {
            let (prep, up) = &inputs[i];
            let u = g.constant(up.clone());
            let coeffs = m.net.decoder_graph(&mut g, &m.params, u);
            let r = recon_graph(&mut g, &m, coeffs, prep);
            acc = Some(match acc {
                Some(a) => g.add(a, r),
                None => r,
            });
        }
        let total = g.scale(acc.expect("batch is nonempty"), 1.0 / idx.len() as f32);
        let recon = scalar(&g, total);
        if !recon.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = g.backward(total);
        adam.step(&mut m.params, &grads);
        log.push(TokenizerLogRow {
            step,
            stage: 2,
            losses: TokenizerLosses {
                recon,
                semantic: 0.0,
                commit: 0.0,
                perceptual: 0.0,
                total: recon,
            },
        });
    }
    for id in m.params.ids().collect::<Vec<_>>() {
        m.params.set_trainable(id, true);
    }
    Ok((m, log))
}

/// Reconstruction loss of `decode(encode(x))` against `x`, as in training.
pub fn recon_error(m: &TokenizerModel, audio: &AudioSignal) -> Result<f64> {
    let prep = prepare(m, audio)?;
    let grid = m.encode(audio)?;
    let y = m.decode(&grid, prep.audio.len())?;
    let wav = y.samples.iter().zip(&prep.audio).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / prep.audio.len() as f64;
    let fy = m.filterbank().log_energies(&y.samples);
    let spec = fy.data().iter().zip(prep.fbank.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / fy.len() as f64;
    Ok(wav + m.cfg.fbank_loss_weight * spec)
}

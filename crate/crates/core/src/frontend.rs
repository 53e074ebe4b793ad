//! 50 Hz analysis features, the frozen teacher, and the 4x rate change
//! between 50 Hz feature frames and 12.5 Hz token frames.

use duotts_nn::layers::Linear;
use duotts_nn::{Float, Graph, Params, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioSignal, SAMPLE_RATE};
use crate::dsp::Filterbank;
use crate::error::{Error, Result};

pub const FEATURE_RATE_HZ: f64 = 50.0;
pub const TOKEN_RATE_HZ: f64 = 12.5;
/// 50 Hz feature frames per 12.5 Hz token frame.
pub const RATE_RATIO: usize = 4;
pub const FBANK_EPS: f64 = 1e-4;

/// Affine map putting log energies of the synthetic corpus roughly in
/// `[-1, 2]`; applied before every learned or frozen projection.
const FBANK_CENTER: f32 = -6.0;
const FBANK_SCALE: f32 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub hop_samples: usize,
    pub n_filters: usize,
    pub teacher_dim: usize,
    pub teacher_seed: u64,
    pub d_latent: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            hop_samples: 320,
            n_filters: 48,
            teacher_dim: 32,
            teacher_seed: 1234,
            d_latent: 64,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_samples == 0 || SAMPLE_RATE as usize != self.hop_samples * 50 {
            return Err(Error::invalid(format!(
                "hop_samples {} does not give 50 Hz frames at {SAMPLE_RATE} Hz",
                self.hop_samples
            )));
        }
        if self.n_filters == 0 || self.teacher_dim == 0 || self.d_latent == 0 {
            return Err(Error::invalid("frontend dimensions must be positive"));
        }
        Ok(())
    }

    pub fn filterbank(&self) -> Filterbank {
        Filterbank::new(SAMPLE_RATE, self.hop_samples, self.n_filters, FBANK_EPS)
    }

    pub fn n_feature_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.hop_samples)
    }

    pub fn n_token_frames(&self, n_samples: usize) -> usize {
        self.n_feature_frames(n_samples).div_ceil(RATE_RATIO)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    pub rate_hz: f64,
    pub frames: Tensor<f32>,
}

impl FeatureSeq {
    pub fn new(rate_hz: f64, frames: Tensor<f32>) -> Self {
        debug_assert!(rate_hz == FEATURE_RATE_HZ || rate_hz == TOKEN_RATE_HZ);
        Self { rate_hz, frames }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

fn check_audio(audio: &AudioSignal) -> Result<()> {
    if audio.is_empty() {
        return Err(Error::invalid("empty audio"));
    }
    if audio.sample_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!("expected {SAMPLE_RATE} Hz audio, got {}", audio.sample_rate)));
    }
    Ok(())
}

/// Raw log-filterbank frames, `ceil(samples / hop)` of them.
pub fn acoustic_features(audio: &AudioSignal, cfg: &FrontendConfig) -> Result<FeatureSeq> {
    check_audio(audio)?;
    Ok(FeatureSeq::new(FEATURE_RATE_HZ, cfg.filterbank().log_energies(&audio.samples)))
}

pub fn normalize_fbank<S: Float>(x: &Tensor<S>) -> Tensor<S> {
    let (c, s) = (S::from_f64(FBANK_CENTER as f64), S::from_f64(FBANK_SCALE as f64));
    Tensor::from_vec(x.shape(), x.data().iter().map(|v| (*v - c) / s).collect())
}

/// Frozen semantic target: `tanh(W norm(fbank))` with `W` drawn from
/// `teacher_seed`. Holds no trainable state.
#[derive(Debug, Clone)]
pub struct Teacher {
    w: Tensor<f32>,
}

impl Teacher {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.teacher_seed);
        let std = 1.0 / (cfg.n_filters as f64).sqrt();
        let data = (0..cfg.teacher_dim * cfg.n_filters)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * std) as f32
            })
            .collect();
        Self {
            w: Tensor::from_vec(&[cfg.teacher_dim, cfg.n_filters], data),
        }
    }

    /// Applies the teacher to raw log-filterbank frames.
    pub fn apply(&self, fbank: &Tensor<f32>) -> Tensor<f32> {
        let x = normalize_fbank(fbank);
        let mut y = duotts_nn::matmul(&x, &self.w, false, true);
        y.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        y
    }
}

pub fn teacher_semantic_features(audio: &AudioSignal, cfg: &FrontendConfig) -> Result<FeatureSeq> {
    let fb = acoustic_features(audio, cfg)?;
    Ok(FeatureSeq::new(FEATURE_RATE_HZ, Teacher::new(cfg).apply(&fb.frames)))
}

/// Zero-pads to a multiple of 4 frames, concatenates each group of 4 and
/// projects to `d_out`.
#[derive(Debug, Clone)]
pub struct Downsample4 {
    pub proj: Linear,
}

impl Downsample4 {
    pub fn new<S: Float, R: Rng>(p: &mut Params<S>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(p, name, RATE_RATIO * d_in, d_out, true, rng),
        }
    }

    pub fn forward<S: Float>(&self, g: &mut Graph<S>, p: &Params<S>, x: Var) -> Var {
        let (t, c) = (g.value(x).rows(), g.value(x).cols());
        let t_out = t.div_ceil(RATE_RATIO);
        let pad = t_out * RATE_RATIO - t;
        let x = if pad > 0 {
            let z = g.constant(Tensor::zeros(&[pad, c]));
            g.concat_rows(&[x, z])
        } else {
            x
        };
        let grouped = g.reshape(x, &[t_out, RATE_RATIO * c]);
        self.proj.forward(g, p, grouped)
    }

    pub fn apply<S: Float>(&self, p: &Params<S>, x: &Tensor<S>) -> Tensor<S> {
        let (t, c) = (x.rows(), x.cols());
        let t_out = t.div_ceil(RATE_RATIO);
        let mut data = x.data().to_vec();
        data.resize(t_out * RATE_RATIO * c, S::zero());
        self.proj.apply(p, &Tensor::from_vec(&[t_out, RATE_RATIO * c], data))
    }
}

/// Expands each token frame to 4 feature frames with one linear map, then
/// truncates. Feature frame `t` depends only on token frame `t / 4`.
#[derive(Debug, Clone)]
pub struct Upsample4 {
    pub proj: Linear,
    pub d_out: usize,
}

impl Upsample4 {
    pub fn new<S: Float, R: Rng>(p: &mut Params<S>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(p, name, d_in, RATE_RATIO * d_out, true, rng),
            d_out,
        }
    }

    fn check(t_in: usize, target: usize) -> Result<()> {
        if target > RATE_RATIO * t_in {
            return Err(Error::invalid(format!(
                "cannot upsample {t_in} token frames to {target} feature frames"
            )));
        }
        Ok(())
    }

    pub fn forward<S: Float>(&self, g: &mut Graph<S>, p: &Params<S>, x: Var, target: usize) -> Result<Var> {
        let t = g.value(x).rows();
        Self::check(t, target)?;
        let y = self.proj.forward(g, p, x);
        let y = g.reshape(y, &[RATE_RATIO * t, self.d_out]);
        Ok(g.slice_rows(y, 0, target))
    }

    pub fn apply<S: Float>(&self, p: &Params<S>, x: &Tensor<S>, target: usize) -> Result<Tensor<S>> {
        Self::check(x.rows(), target)?;
        let y = self.proj.apply(p, x);
        let mut data = y.into_vec();
        data.truncate(target * self.d_out);
        Ok(Tensor::from_vec(&[target, self.d_out], data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(n: usize) -> AudioSignal {
        AudioSignal::new((0..n).map(|i| (i as f32 * 0.1).sin() * 0.5).collect())
    }

    #[test]
    fn frame_counts() {
        let cfg = FrontendConfig::default();
        assert_eq!(acoustic_features(&tone(16000), &cfg).unwrap().len(), 50);
        assert_eq!(acoustic_features(&tone(16001), &cfg).unwrap().len(), 51);
        assert!(acoustic_features(&AudioSignal::new(vec![]), &cfg).is_err());
        assert_eq!(cfg.n_token_frames(16000), 13);
    }

    #[test]
    fn silence_is_floor() {
        let f = acoustic_features(&AudioSignal::new(vec![0.0; 1000]), &FrontendConfig::default()).unwrap();
        let floor = (FBANK_EPS).ln() as f32;
        assert!(f.frames.data().iter().all(|v| *v == floor));
    }

    #[test]
    fn teacher_depends_on_seed_only() {
        let cfg = FrontendConfig::default();
        let a = teacher_semantic_features(&tone(4000), &cfg).unwrap();
        assert_eq!(a, teacher_semantic_features(&tone(4000), &cfg).unwrap());
        assert_eq!(a.len(), acoustic_features(&tone(4000), &cfg).unwrap().len());
        assert_eq!(a.dim(), 32);
        let other = FrontendConfig { teacher_seed: 99, ..cfg };
        let b = teacher_semantic_features(&tone(4000), &other).unwrap();
        let diff = a.frames.data().iter().zip(b.frames.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn down_up_shapes_and_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Params::<f32>::new();
        let down = Downsample4::new(&mut p, "down", 3, 5, &mut rng);
        let up = Upsample4::new(&mut p, "up", 5, 3, &mut rng);
        let x = Tensor::from_vec(&[50, 3], (0..150).map(|i| i as f32 * 0.01).collect());
        assert_eq!(down.apply(&p, &Tensor::<f32>::zeros(&[8, 3])).rows(), 2);
        let z = down.apply(&p, &x);
        assert_eq!(z.rows(), 13);
        assert_eq!(up.apply(&p, &z, 50).unwrap().rows(), 50);
        assert_eq!(up.apply(&p, &Tensor::<f32>::zeros(&[2, 5]), 8).unwrap().rows(), 8);
        assert!(up.apply(&p, &z, 53).is_err());

        let base = up.apply(&p, &z, 52).unwrap();
        let mut z2 = z.clone();
        z2.row_mut(1)[0] += 1.0;
        let pert = up.apply(&p, &z2, 52).unwrap();
        assert_eq!(base.data()[..4 * 3], pert.data()[..4 * 3]);
        assert_ne!(base.row(4), pert.row(4));
    }

    #[test]
    fn graph_matches_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::<f64>::new();
        let down = Downsample4::new(&mut p, "down", 3, 5, &mut rng);
        let up = Upsample4::new(&mut p, "up", 5, 3, &mut rng);
        let x = Tensor::from_vec(&[10, 3], (0..30).map(|i| (i as f64).sin()).collect());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = down.forward(&mut g, &p, xv);
        let y = up.forward(&mut g, &p, z, 10).unwrap();
        let want = up.apply(&p, &down.apply(&p, &x), 10).unwrap();
        for (a, b) in g.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn token_frame_arithmetic(n in 1usize..200_000) {
            let cfg = FrontendConfig::default();
            let feats = cfg.filterbank().n_frames(n);
            prop_assert_eq!(feats, n.div_ceil(320));
            prop_assert_eq!(cfg.n_token_frames(n), n.div_ceil(320).div_ceil(4));
        }
    }
}

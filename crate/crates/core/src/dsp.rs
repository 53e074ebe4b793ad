//! Filterbank analysis and oscillator-bank synthesis, each with a
//! hand-written backward pass so they can sit inside training graphs.

use std::sync::Arc;

use duotts_nn::{CustomOp, Float, Tensor};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};

/// Scalars usable both in graphs and in FFTs.
pub trait Real: Float + FftNum {}
impl Real for f32 {}
impl Real for f64 {}

/// `f64` to `S` without the `FromPrimitive` ambiguity.
pub fn lit<S: Real>(v: f64) -> S {
    <S as Float>::from_f64(v)
}

/// Hann-windowed power spectrum per hop-sized frame, pooled by triangular
/// filters on the mel scale up to Nyquist, then `ln(E + eps)`. Low filters
/// narrower than a bin collapse onto the nearest bin.
#[derive(Debug, Clone)]
pub struct Filterbank {
    pub frame: usize,
    pub n_filters: usize,
    pub eps: f64,
    window: Vec<f64>,
    /// Per filter: `(bin, weight)` pairs.
    filters: Vec<Vec<(usize, f64)>>,
    power_norm: f64,
}

impl Filterbank {
    pub fn new(sample_rate: u32, frame: usize, n_filters: usize, eps: f64) -> Self {
        let window: Vec<f64> = (0..frame)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / frame as f64).cos())
            .collect();
        let wsum: f64 = window.iter().sum();
        let n_bins = frame / 2 + 1;
        let bin_hz = sample_rate as f64 / frame as f64;
        let nyq = sample_rate as f64 / 2.0;
        let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let edges: Vec<f64> = (0..n_filters + 2)
            .map(|i| inv(mel(nyq) * i as f64 / (n_filters + 1) as f64))
            .collect();
        let filters = (0..n_filters)
            .map(|f| {
                let (lo, c, hi) = (edges[f], edges[f + 1], edges[f + 2]);
                let mut taps: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let hz = k as f64 * bin_hz;
                        let w = if hz <= c { (hz - lo) / (c - lo) } else { (hi - hz) / (hi - c) };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                if taps.is_empty() {
                    taps.push(((c / bin_hz).round() as usize, 1.0));
                }
                taps
            })
            .collect();
        Self {
            frame,
            n_filters,
            eps,
            window,
            filters,
            power_norm: 1.0 / (wsum * wsum),
        }
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.frame)
    }

    fn n_bins(&self) -> usize {
        self.frame / 2 + 1
    }

    /// Log energies `[T, n_filters]` and the complex spectra needed for the
    /// backward pass.
    pub fn analyse<S: Real>(&self, samples: &[S]) -> (Tensor<S>, Vec<Complex<S>>) {
        let t = self.n_frames(samples.len());
        let fft = FftPlanner::<S>::new().plan_fft_forward(self.frame);
        let nb = self.n_bins();
        let mut out = Tensor::zeros(&[t, self.n_filters]);
        let mut spectra = Vec::with_capacity(t * nb);
        let mut buf = vec![Complex::new(S::zero(), S::zero()); self.frame];
        for f in 0..t {
            for (n, slot) in buf.iter_mut().enumerate() {
                let x = samples.get(f * self.frame + n).copied().unwrap_or(S::zero());
                *slot = Complex::new(x * lit::<S>(self.window[n]), S::zero());
            }
            fft.process(&mut buf);
            spectra.extend_from_slice(&buf[..nb]);
            let row = out.row_mut(f);
            for (i, filt) in self.filters.iter().enumerate() {
                let e: f64 = filt.iter().map(|(k, w)| w * buf[*k].norm_sqr().as_f64()).sum::<f64>() * self.power_norm;
                row[i] = lit::<S>((e + self.eps).ln());
            }
        }
        (out, spectra)
    }

    pub fn log_energies<S: Real>(&self, samples: &[S]) -> Tensor<S> {
        self.analyse(samples).0
    }

    /// Custom graph op computing `analyse` on a flat sample vector.
    pub fn op<S: Real>(self: &Arc<Self>, samples: &[S]) -> (Tensor<S>, Box<dyn CustomOp<S>>) {
        let (out, spectra) = self.analyse(samples);
        let op = LogFbankOp {
            fb: Arc::clone(self),
            spectra,
            n_samples: samples.len(),
        };
        (out, Box::new(op))
    }
}

struct LogFbankOp<S> {
    fb: Arc<Filterbank>,
    spectra: Vec<Complex<S>>,
    n_samples: usize,
}

impl<S: Real> CustomOp<S> for LogFbankOp<S> {
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, grad: &Tensor<S>) -> Vec<Option<Tensor<S>>> {
        let fb = &self.fb;
        let nb = fb.n_bins();
        let fft = FftPlanner::<S>::new().plan_fft_forward(fb.frame);
        let mut dx = Tensor::zeros(inputs[0].shape());
        let mut dp = vec![0.0f64; nb];
        let mut buf = vec![Complex::new(S::zero(), S::zero()); fb.frame];
        for f in 0..output.rows() {
            dp.fill(0.0);
            for (i, filt) in fb.filters.iter().enumerate() {
                // d ln(E + eps) / dE = 1 / (E + eps) = exp(-out)
                let de = grad.row(f)[i].as_f64() * (-output.row(f)[i].as_f64()).exp() * fb.power_norm;
                for (k, w) in filt {
                    dp[*k] += de * w;
                }
            }
            // dP_k/dx_n = 2 Re(conj(X_k) w_n e^{-i 2 pi k n / N})
            buf.fill(Complex::new(S::zero(), S::zero()));
            for k in 0..nb {
                let c = self.spectra[f * nb + k].conj();
                buf[k] = c * lit::<S>(dp[k]);
            }
            fft.process(&mut buf);
            let d = dx.data_mut();
            for (n, b) in buf.iter().enumerate() {
                let idx = f * fb.frame + n;
                if idx < self.n_samples {
                    d[idx] = lit::<S>(2.0 * fb.window[n] * b.re.as_f64());
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Sum of sinusoids on a fixed frequency grid whose phases are referenced
/// to absolute sample time. Each frame carries a cosine and a sine
/// amplitude per grid bin; the signal is periodic in `period` samples, so
/// a frame is an inverse FFT of size `period` read at its absolute offset.
#[derive(Debug, Clone)]
pub struct OscillatorBank {
    pub hop: usize,
    pub period: usize,
    pub first_bin: usize,
    pub n_bins: usize,
}

impl OscillatorBank {
    pub fn new(sample_rate: u32, hop: usize, grid_hz: f64, lo_hz: f64, hi_hz: f64) -> Self {
        let period = (sample_rate as f64 / grid_hz).round() as usize;
        let first_bin = (lo_hz / grid_hz).ceil() as usize;
        let last_bin = (hi_hz / grid_hz).floor() as usize;
        Self {
            hop,
            period,
            first_bin,
            n_bins: last_bin + 1 - first_bin,
        }
    }

    /// Coefficients per frame: `n_bins` cosine then `n_bins` sine amplitudes.
    pub fn n_coeffs(&self) -> usize {
        2 * self.n_bins
    }

    pub fn grid_hz(&self, sample_rate: u32) -> f64 {
        sample_rate as f64 / self.period as f64
    }

    /// Renders `coeffs.rows()` frames starting at absolute frame `t0`.
    pub fn synth<S: Real>(&self, coeffs: &Tensor<S>, t0: usize) -> Vec<S> {
        let ifft = FftPlanner::<S>::new().plan_fft_inverse(self.period);
        let mut out = Vec::with_capacity(coeffs.rows() * self.hop);
        let mut buf = vec![Complex::new(S::zero(), S::zero()); self.period];
        for f in 0..coeffs.rows() {
            self.synth_frame(&*ifft, coeffs.row(f), t0 + f, &mut buf, &mut out);
        }
        out
    }

    fn synth_frame<S: Real>(&self, ifft: &dyn Fft<S>, row: &[S], frame: usize, buf: &mut [Complex<S>], out: &mut Vec<S>) {
        buf.fill(Complex::new(S::zero(), S::zero()));
        for i in 0..self.n_bins {
            buf[self.first_bin + i] = Complex::new(row[i], -row[self.n_bins + i]);
        }
        ifft.process(buf);
        let start = (frame * self.hop) % self.period;
        for j in 0..self.hop {
            out.push(buf[(start + j) % self.period].re);
        }
    }

    pub fn op<S: Real>(&self, coeffs: &Tensor<S>, t0: usize) -> (Tensor<S>, Box<dyn CustomOp<S>>) {
        let samples = self.synth(coeffs, t0);
        let n = samples.len();
        (Tensor::from_vec(&[n], samples), Box::new(SynthOp { bank: self.clone(), t0 }))
    }
}

struct SynthOp {
    bank: OscillatorBank,
    t0: usize,
}

impl<S: Real> CustomOp<S> for SynthOp {
    fn backward(&self, inputs: &[&Tensor<S>], _output: &Tensor<S>, grad: &Tensor<S>) -> Vec<Option<Tensor<S>>> {
        let b = &self.bank;
        let fft = FftPlanner::<S>::new().plan_fft_forward(b.period);
        let coeffs = inputs[0];
        let mut d = Tensor::zeros(coeffs.shape());
        let mut buf = vec![Complex::new(S::zero(), S::zero()); b.period];
        for f in 0..coeffs.rows() {
            buf.fill(Complex::new(S::zero(), S::zero()));
            let start = ((self.t0 + f) * b.hop) % b.period;
            for j in 0..b.hop {
                buf[(start + j) % b.period].re = grad.data()[f * b.hop + j];
            }
            fft.process(&mut buf);
            let row = d.row_mut(f);
            for i in 0..b.n_bins {
                let c = buf[b.first_bin + i];
                row[i] = c.re;
                row[b.n_bins + i] = -c.im;
            }
        }
        vec![Some(d)]
    }
}

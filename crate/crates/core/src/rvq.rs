//! Residual vector quantizer with EMA codebook learning.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use duotts_nn::{Float, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::frontend::{FeatureSeq, TOKEN_RATE_HZ};

pub const COMMIT_BETA: f64 = 0.25;
pub const DEFAULT_DECAY: f32 = 0.99;
pub const DEAD_THRESHOLD: f32 = 1e-3;
const COUNT_EPS: f32 = 1e-5;

const CODEBOOK_MAGIC: &[u8; 4] = b"DTCB";
const GRID_MAGIC: &[u8; 4] = b"DTTG";
const FILE_VERSION: u32 = 1;

/// `n_layers x n_entries x dim` code vectors plus EMA statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    pub n_layers: usize,
    pub n_entries: usize,
    pub dim: usize,
    pub decay: f32,
    pub dead_threshold: f32,
    vectors: Vec<f32>,
    ema_counts: Vec<f32>,
    ema_sums: Vec<f32>,
    /// Per layer, dim-major copy of `vectors` for the vectorised search.
    transposed: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub n_frames: usize,
    pub n_layers: usize,
    pub n_entries: usize,
    codes: Vec<u16>,
}

#[derive(Debug, Clone)]
pub struct Quantized {
    pub grid: TokenGrid,
    pub quantized: Tensor<f32>,
    /// Mean squared residual norm after each layer.
    pub residual_norms: Vec<f64>,
}

impl TokenGrid {
    pub fn new(n_frames: usize, n_layers: usize, n_entries: usize, codes: Vec<u16>) -> Result<Self> {
        if codes.len() != n_frames * n_layers {
            return Err(Error::invalid(format!(
                "{} codes for a {n_frames}x{n_layers} grid",
                codes.len()
            )));
        }
        let g = Self { n_frames, n_layers, n_entries, codes };
        g.validate()?;
        Ok(g)
    }

    pub fn empty(n_layers: usize, n_entries: usize) -> Self {
        Self { n_frames: 0, n_layers, n_entries, codes: vec![] }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.codes.iter().enumerate() {
            if *c as usize >= self.n_entries {
                return Err(Error::CodeOutOfRange {
                    frame: i / self.n_layers,
                    layer: i % self.n_layers,
                    code: *c as usize,
                    n_entries: self.n_entries,
                });
            }
        }
        Ok(())
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn frame(&self, t: usize) -> &[u16] {
        &self.codes[t * self.n_layers..(t + 1) * self.n_layers]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [u16] {
        &mut self.codes[t * self.n_layers..(t + 1) * self.n_layers]
    }

    pub fn get(&self, t: usize, layer: usize) -> u16 {
        self.codes[t * self.n_layers + layer]
    }

    pub fn push_frame(&mut self, frame: &[u16]) {
        assert_eq!(frame.len(), self.n_layers);
        self.codes.extend_from_slice(frame);
        self.n_frames += 1;
    }

    pub fn slice(&self, start: usize, end: usize) -> TokenGrid {
        TokenGrid {
            n_frames: end - start,
            n_layers: self.n_layers,
            n_entries: self.n_entries,
            codes: self.codes[start * self.n_layers..end * self.n_layers].to_vec(),
        }
    }

    pub fn concat(&self, other: &TokenGrid) -> TokenGrid {
        assert_eq!(self.n_layers, other.n_layers);
        let mut codes = self.codes.clone();
        codes.extend_from_slice(&other.codes);
        TokenGrid {
            n_frames: self.n_frames + other.n_frames,
            n_layers: self.n_layers,
            n_entries: self.n_entries,
            codes,
        }
    }

    /// Layer-1 code of every frame.
    pub fn first_layer(&self) -> Vec<u16> {
        (0..self.n_frames).map(|t| self.get(t, 0)).collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(GRID_MAGIC)?;
        for v in [FILE_VERSION, self.n_frames as u32, self.n_layers as u32, self.n_entries as u32] {
            w.write_u32::<LittleEndian>(v)?;
        }
        for c in &self.codes {
            w.write_u16::<LittleEndian>(*c)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("token grid: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != GRID_MAGIC {
            return Err(Error::Format("not a token grid file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != FILE_VERSION {
            return Err(Error::Format(format!("unsupported token grid version {version}")));
        }
        let mut h = [0usize; 3];
        for v in &mut h {
            *v = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        }
        let mut codes = vec![0u16; h[0] * h[1]];
        r.read_u16_into::<LittleEndian>(&mut codes).map_err(fmt)?;
        TokenGrid::new(h[0], h[1], h[2], codes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut f).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }
}

/// Bits per second of a `layers x entries` RVQ at `frame_rate_hz`.
pub fn bitrate_for(n_layers: usize, n_entries: usize, frame_rate_hz: f64) -> Result<f64> {
    if !n_entries.is_power_of_two() {
        return Err(Error::invalid(format!("{n_entries} entries is not a power of two")));
    }
    Ok(frame_rate_hz * n_layers as f64 * n_entries.trailing_zeros() as f64)
}

impl CodebookSet {
    /// Codebooks with every entry zero and unit EMA counts.
    pub fn zeros(n_layers: usize, n_entries: usize, dim: usize) -> Self {
        assert!(n_entries <= u16::MAX as usize + 1);
        let mut cb = Self {
            n_layers,
            n_entries,
            dim,
            decay: DEFAULT_DECAY,
            dead_threshold: DEAD_THRESHOLD,
            vectors: vec![0.0; n_layers * n_entries * dim],
            ema_counts: vec![1.0; n_layers * n_entries],
            ema_sums: vec![0.0; n_layers * n_entries * dim],
            transposed: vec![],
        };
        cb.refresh();
        cb
    }

    pub fn random<R: Rng>(n_layers: usize, n_entries: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let mut cb = Self::zeros(n_layers, n_entries, dim);
        for v in cb.vectors.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = (z * std) as f32;
        }
        cb.ema_sums.copy_from_slice(&cb.vectors);
        cb.refresh();
        cb
    }

    /// Builds from explicit vectors `[layer][entry][dim]`.
    pub fn from_vectors(n_layers: usize, n_entries: usize, dim: usize, vectors: Vec<f32>) -> Self {
        assert_eq!(vectors.len(), n_layers * n_entries * dim);
        let mut cb = Self::zeros(n_layers, n_entries, dim);
        cb.ema_sums.copy_from_slice(&vectors);
        cb.vectors = vectors;
        cb.refresh();
        cb
    }

    /// Rebuilds from the three stored arrays (see `parts`).
    pub fn from_parts(shape: [usize; 3], vectors: Vec<f32>, counts: Vec<f32>, sums: Vec<f32>, decay: f32) -> Result<Self> {
        let [l, k, d] = shape;
        if vectors.len() != l * k * d || sums.len() != l * k * d || counts.len() != l * k {
            return Err(Error::Format(format!("codebook arrays do not match shape {l}x{k}x{d}")));
        }
        let mut cb = Self::zeros(l, k, d);
        cb.vectors = vectors;
        cb.ema_counts = counts;
        cb.ema_sums = sums;
        cb.decay = decay;
        cb.refresh();
        Ok(cb)
    }

    /// `(vectors [L, K, D], ema_counts [L, K], ema_sums [L, K, D])`.
    pub fn parts(&self) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let (l, k, d) = (self.n_layers, self.n_entries, self.dim);
        (
            Tensor::from_vec(&[l, k, d], self.vectors.clone()),
            Tensor::from_vec(&[l, k], self.ema_counts.clone()),
            Tensor::from_vec(&[l, k, d], self.ema_sums.clone()),
        )
    }

    pub fn vector(&self, layer: usize, entry: usize) -> &[f32] {
        let o = (layer * self.n_entries + entry) * self.dim;
        &self.vectors[o..o + self.dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn ema_counts(&self) -> &[f32] {
        &self.ema_counts
    }

    pub fn bitrate(&self, frame_rate_hz: f64) -> Result<f64> {
        bitrate_for(self.n_layers, self.n_entries, frame_rate_hz)
    }

    pub fn bitrate_default(&self) -> Result<f64> {
        self.bitrate(TOKEN_RATE_HZ)
    }

    pub fn all_finite(&self) -> bool {
        self.vectors.iter().all(|v| v.is_finite()) && self.ema_counts.iter().all(|c| c.is_finite() && *c >= 0.0)
    }

    fn refresh(&mut self) {
        let (k, d) = (self.n_entries, self.dim);
        self.transposed.resize(self.vectors.len(), 0.0);
        for l in 0..self.n_layers {
            let base = l * k * d;
            for e in 0..k {
                for j in 0..d {
                    self.transposed[base + j * k + e] = self.vectors[base + e * d + j];
                }
            }
        }
    }

    /// Nearest entry of `layer` to `r`; squared distances accumulated in
    /// dim order, ties to the lowest index.
    fn nearest(&self, layer: usize, r: &[f32], dist: &mut [f32]) -> usize {
        let k = self.n_entries;
        let base = layer * k * self.dim;
        dist.fill(0.0);
        for (j, rj) in r.iter().enumerate() {
            let col = &self.transposed[base + j * k..base + (j + 1) * k];
            for (dk, e) in dist.iter_mut().zip(col) {
                let diff = rj - e;
                *dk += diff * diff;
            }
        }
        let mut best = 0;
        for (i, v) in dist.iter().enumerate().skip(1) {
            if *v < dist[best] {
                best = i;
            }
        }
        best
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, got });
        }
        Ok(())
    }

    pub fn quantize(&self, x: &FeatureSeq) -> Result<Quantized> {
        self.quantize_frames(&x.frames)
    }

    /// Quantizes rows of `x` (`[T, dim]`).
    pub fn quantize_frames(&self, x: &Tensor<f32>) -> Result<Quantized> {
        let (t, d) = (if x.is_empty() { 0 } else { x.rows() }, x.cols());
        self.check_dim(d)?;
        let mut codes = Vec::with_capacity(t * self.n_layers);
        let mut quantized = Tensor::zeros(&[t, d]);
        let mut norms = vec![0.0f64; self.n_layers];
        let mut dist = vec![0.0f32; self.n_entries];
        let mut r = vec![0.0f32; d];
        for f in 0..t {
            r.copy_from_slice(x.row(f));
            let q = quantized.row_mut(f);
            for (l, norm) in norms.iter_mut().enumerate() {
                let c = self.nearest(l, &r, &mut dist);
                codes.push(c as u16);
                let v = self.vector(l, c);
                for j in 0..d {
                    r[j] -= v[j];
                    q[j] += v[j];
                }
                *norm += r.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
            }
        }
        if t > 0 {
            norms.iter_mut().for_each(|n| *n /= t as f64);
        }
        Ok(Quantized {
            grid: TokenGrid {
                n_frames: t,
                n_layers: self.n_layers,
                n_entries: self.n_entries,
                codes,
            },
            quantized,
            residual_norms: norms,
        })
    }

    fn check_grid(&self, g: &TokenGrid) -> Result<()> {
        if g.n_layers != self.n_layers {
            return Err(Error::invalid(format!(
                "grid has {} layers, codebooks have {}",
                g.n_layers, self.n_layers
            )));
        }
        TokenGrid { n_entries: self.n_entries, ..g.clone() }.validate()
    }

    /// Per frame, the sum over layers of the selected vectors (same
    /// summation order as `quantize`).
    pub fn dequantize(&self, g: &TokenGrid) -> Result<Tensor<f32>> {
        self.check_grid(g)?;
        let mut out = Tensor::zeros(&[g.n_frames, self.dim]);
        for f in 0..g.n_frames {
            let q = out.row_mut(f);
            for (l, c) in g.frame(f).iter().enumerate() {
                for (dst, v) in q.iter_mut().zip(self.vector(l, *c as usize)) {
                    *dst += v;
                }
            }
        }
        Ok(out)
    }

    pub fn dequantize_seq(&self, g: &TokenGrid) -> Result<FeatureSeq> {
        Ok(FeatureSeq::new(TOKEN_RATE_HZ, self.dequantize(g)?))
    }

    /// Residual entering each layer: `x` minus the vectors chosen by
    /// earlier layers.
    fn layer_inputs(&self, x: &Tensor<f32>, g: &TokenGrid) -> Vec<Vec<f32>> {
        let d = self.dim;
        let mut out = vec![Vec::with_capacity(g.n_frames * d); self.n_layers];
        for f in 0..g.n_frames {
            let mut r = x.row(f).to_vec();
            for (l, c) in g.frame(f).iter().enumerate() {
                out[l].extend_from_slice(&r);
                for (rj, v) in r.iter_mut().zip(self.vector(l, *c as usize)) {
                    *rj -= v;
                }
            }
        }
        out
    }

    /// One EMA step from the batch `x` and its assignments `g`. Entries
    /// whose count falls below `dead_threshold` are moved onto a random
    /// residual from the batch.
    pub fn ema_update<R: Rng>(&mut self, x: &Tensor<f32>, g: &TokenGrid, rng: &mut R) -> Result<usize> {
        self.check_dim(x.cols())?;
        self.check_grid(g)?;
        let (k, d, decay) = (self.n_entries, self.dim, self.decay);
        let inputs = self.layer_inputs(x, g);
        let mut reseeded = 0;
        let mut counts = vec![0.0f32; k];
        let mut sums = vec![0.0f32; k * d];
        for (l, res) in inputs.iter().enumerate() {
            counts.fill(0.0);
            sums.fill(0.0);
            for f in 0..g.n_frames {
                let c = g.get(f, l) as usize;
                counts[c] += 1.0;
                for j in 0..d {
                    sums[c * d + j] += res[f * d + j];
                }
            }
            for e in 0..k {
                let ci = l * k + e;
                self.ema_counts[ci] = decay * self.ema_counts[ci] + (1.0 - decay) * counts[e];
                let vo = ci * d;
                for j in 0..d {
                    self.ema_sums[vo + j] = decay * self.ema_sums[vo + j] + (1.0 - decay) * sums[e * d + j];
                }
                if self.ema_counts[ci] < self.dead_threshold && g.n_frames > 0 {
                    let f = rng.random_range(0..g.n_frames);
                    self.ema_counts[ci] = 1.0;
                    self.ema_sums[vo..vo + d].copy_from_slice(&res[f * d..(f + 1) * d]);
                    reseeded += 1;
                }
                let n = self.ema_counts[ci].max(COUNT_EPS);
                for j in 0..d {
                    self.vectors[vo + j] = self.ema_sums[vo + j] / n;
                }
            }
        }
        self.refresh();
        Ok(reseeded)
    }

    /// k-means++ seeding, layer by layer on the residuals left by earlier
    /// layers. When the batch has fewer distinct points than entries, the
    /// rest are jittered copies of seeded entries.
    pub fn init_kmeanspp<R: Rng>(&mut self, x: &Tensor<f32>, rng: &mut R) -> Result<()> {
        self.check_dim(x.cols())?;
        let (n, d, k) = (x.rows(), self.dim, self.n_entries);
        if x.is_empty() {
            return Err(Error::invalid("cannot seed codebooks from an empty batch"));
        }
        let mut res = x.data().to_vec();
        for l in 0..self.n_layers {
            let point = |i: usize| &res[i * d..(i + 1) * d];
            let rms = (res.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / res.len() as f64).sqrt();
            let mut chosen: Vec<usize> = vec![rng.random_range(0..n)];
            let mut best: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(chosen[0]))).collect();
            while chosen.len() < k {
                let total: f64 = best.iter().sum();
                if total <= 0.0 {
                    break;
                }
                let mut u = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, b) in best.iter().enumerate() {
                    if u < *b {
                        pick = i;
                        break;
                    }
                    u -= b;
                }
                chosen.push(pick);
                for (i, b) in best.iter_mut().enumerate() {
                    *b = b.min(sq_dist(point(i), point(pick)));
                }
            }
            let jitter = 0.01 * rms.max(1e-6);
            for e in 0..k {
                let o = (l * k + e) * d;
                let src = chosen[if e < chosen.len() { e } else { rng.random_range(0..chosen.len()) }];
                for j in 0..d {
                    let noise = if e < chosen.len() {
                        0.0
                    } else {
                        let z: f64 = StandardNormal.sample(rng);
                        z * jitter
                    };
                    self.vectors[o + j] = res[src * d + j] + noise as f32;
                }
                self.ema_sums[o..o + d].copy_from_slice(&self.vectors[o..o + d]);
                self.ema_counts[l * k + e] = 1.0;
            }
            self.refresh();
            let mut dist = vec![0.0f32; k];
            for i in 0..n {
                let c = self.nearest(l, &res[i * d..(i + 1) * d], &mut dist);
                let o = (l * k + c) * d;
                for j in 0..d {
                    res[i * d + j] -= self.vectors[o + j];
                }
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        for v in [FILE_VERSION, self.n_layers as u32, self.n_entries as u32, self.dim as u32] {
            w.write_u32::<LittleEndian>(v)?;
        }
        for part in [&self.vectors, &self.ema_counts, &self.ema_sums] {
            for v in part.iter() {
                w.write_f32::<LittleEndian>(*v)?;
            }
        }
        w.write_f32::<LittleEndian>(self.decay)?;
        w.write_f32::<LittleEndian>(self.dead_threshold)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("codebook: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::Format("not a codebook file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != FILE_VERSION {
            return Err(Error::Format(format!("unsupported codebook version {version}")));
        }
        let mut h = [0usize; 3];
        for v in &mut h {
            *v = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        }
        let mut cb = Self::zeros(h[0], h[1], h[2]);
        r.read_f32_into::<LittleEndian>(&mut cb.vectors).map_err(fmt)?;
        r.read_f32_into::<LittleEndian>(&mut cb.ema_counts).map_err(fmt)?;
        r.read_f32_into::<LittleEndian>(&mut cb.ema_sums).map_err(fmt)?;
        cb.decay = r.read_f32::<LittleEndian>().map_err(fmt)?;
        cb.dead_threshold = r.read_f32::<LittleEndian>().map_err(fmt)?;
        cb.refresh();
        Ok(cb)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

/// Straight-through quantization inside a graph: the output carries the
/// value `quantized` and passes gradients to `x` unchanged. Also returns
/// the commitment penalty `beta * mean((x - sg(quantized))^2)`.
pub fn straight_through<S: Float>(g: &mut Graph<S>, x: Var, quantized: Tensor<S>, beta: f64) -> (Var, Var) {
    let target = g.constant(quantized.clone());
    let diff = g.sub(x, target);
    let sq = g.square(diff);
    let m = g.mean(sq);
    let commit = g.scale(m, S::from_f64(beta));
    (g.straight_through(x, quantized), commit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force(cb: &CodebookSet, x: &[f32]) -> Vec<u16> {
        let mut r = x.to_vec();
        let mut out = vec![];
        for l in 0..cb.n_layers {
            let mut best = (0usize, f32::INFINITY);
            for e in 0..cb.n_entries {
                let mut s = 0.0f32;
                for (a, b) in r.iter().zip(cb.vector(l, e)) {
                    s += (a - b) * (a - b);
                }
                if s < best.1 {
                    best = (e, s);
                }
            }
            out.push(best.0 as u16);
            for (a, b) in r.iter_mut().zip(cb.vector(l, best.0)) {
                *a -= b;
            }
        }
        out
    }

    #[test]
    fn nearest_by_inspection() {
        let cb = CodebookSet::from_vectors(1, 2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let q = cb.quantize_frames(&Tensor::from_vec(&[1, 2], vec![0.9, 1.1])).unwrap();
        assert_eq!(q.grid.codes(), &[1]);
        assert_eq!(q.quantized.data(), &[1.0, 1.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = CodebookSet::from_vectors(1, 3, 1, vec![1.0, -1.0, 1.0]);
        let q = cb.quantize_frames(&Tensor::from_vec(&[1, 1], vec![0.0])).unwrap();
        assert_eq!(q.grid.codes(), &[0]);
    }

    #[test]
    fn exact_entry_with_zero_layers_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cb = CodebookSet::random(4, 8, 3, 1.0, &mut rng);
        for l in 1..4 {
            for e in 0..8 {
                let o = (l * 8 + e) * 3;
                cb.vectors[o..o + 3].fill(0.0);
            }
        }
        cb.refresh();
        let x = Tensor::from_vec(&[1, 3], cb.vector(0, 5).to_vec());
        let q = cb.quantize_frames(&x).unwrap();
        assert_eq!(q.quantized.data(), x.data());
        assert!(q.residual_norms.iter().all(|n| *n == 0.0));
    }

    #[test]
    fn matches_brute_force_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = CodebookSet::random(16, 2048, 64, 1.0, &mut rng);
        let data: Vec<f32> = (0..100 * 64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(&[100, 64], data);
        let q = cb.quantize_frames(&x).unwrap();
        for f in 0..100 {
            assert_eq!(q.grid.frame(f), brute_force(&cb, x.row(f)).as_slice());
        }
        assert_eq!(cb.dequantize(&q.grid).unwrap(), q.quantized);
    }

    #[test]
    fn dequantize_lookups_and_errors() {
        let vectors: Vec<f32> = (0..2 * 10 * 2).map(|i| i as f32).collect();
        let cb = CodebookSet::from_vectors(2, 10, 2, vectors);
        let g = TokenGrid::new(1, 2, 10, vec![5, 9]).unwrap();
        let want: Vec<f32> = cb.vector(0, 5).iter().zip(cb.vector(1, 9)).map(|(a, b)| a + b).collect();
        assert_eq!(cb.dequantize(&g).unwrap().data(), want.as_slice());
        let zero = TokenGrid::new(1, 2, 10, vec![0, 0]).unwrap();
        assert_eq!(cb.dequantize(&zero).unwrap().data(), &[20.0, 22.0]);
        let bad = TokenGrid { n_frames: 2, n_layers: 2, n_entries: 64, codes: vec![0, 0, 3, 12] };
        let msg = cb.dequantize(&bad).unwrap_err().to_string();
        assert!(msg.contains("frame 1") && msg.contains("layer 1"), "{msg}");
        assert!(cb.quantize_frames(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn bitrate_arithmetic() {
        assert_eq!(bitrate_for(16, 2048, 12.5).unwrap(), 2200.0);
        assert_eq!(bitrate_for(1, 2, 1.0).unwrap(), 1.0);
        assert_eq!(bitrate_for(8, 2048, 12.5).unwrap(), 1100.0);
        assert!(bitrate_for(16, 2000, 12.5).is_err());
    }

    #[test]
    fn ema_decay_zero_takes_batch_mean() {
        let mut cb = CodebookSet::from_vectors(1, 3, 2, vec![0.0, 0.0, 5.0, 5.0, -5.0, -5.0]);
        cb.decay = 0.0;
        let x = Tensor::from_vec(&[3, 2], vec![4.0, 5.0, 6.0, 5.0, 5.0, 8.0]);
        let q = cb.quantize_frames(&x).unwrap();
        assert_eq!(q.grid.codes(), &[1, 1, 1]);
        cb.ema_update(&x, &q.grid, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(cb.vector(0, 1), &[5.0, 6.0]);
    }

    #[test]
    fn ema_unassigned_entry_keeps_vector() {
        let mut cb = CodebookSet::from_vectors(1, 2, 2, vec![0.0, 0.0, 3.0, -1.0]);
        let x = Tensor::from_vec(&[1, 2], vec![0.1, 0.1]);
        let q = cb.quantize_frames(&x).unwrap();
        cb.ema_update(&x, &q.grid, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (a, b) in cb.vector(0, 1).iter().zip([3.0, -1.0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ema_converges_to_cluster_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let means = [[3.0f32, 0.0], [-3.0, 0.0], [0.0, 3.0], [0.0, -3.0]];
        let batch = |rng: &mut ChaCha8Rng| {
            let mut data = vec![];
            for i in 0..64 {
                let m = means[i % 4];
                for v in m {
                    let z: f64 = StandardNormal.sample(rng);
                    data.push(v + 0.3 * z as f32);
                }
            }
            Tensor::from_vec(&[64, 2], data)
        };
        let mut cb = CodebookSet::zeros(1, 4, 2);
        cb.init_kmeanspp(&batch(&mut rng), &mut rng).unwrap();
        let mut all = vec![];
        for _ in 0..200 {
            let x = batch(&mut rng);
            let q = cb.quantize_frames(&x).unwrap();
            cb.ema_update(&x, &q.grid, &mut rng).unwrap();
            all.push(x);
        }
        // Oracle: Lloyd's k-means on all seen data, started from the means.
        let mut centers = means.map(|m| m.map(|v| v as f64));
        for _ in 0..10 {
            let mut acc = [[0.0f64; 3]; 4];
            for x in &all {
                for f in 0..x.rows() {
                    let r = x.row(f);
                    let c = (0..4)
                        .min_by(|a, b| {
                            let da = (r[0] as f64 - centers[*a][0]).powi(2) + (r[1] as f64 - centers[*a][1]).powi(2);
                            let db = (r[0] as f64 - centers[*b][0]).powi(2) + (r[1] as f64 - centers[*b][1]).powi(2);
                            da.total_cmp(&db)
                        })
                        .unwrap();
                    acc[c][0] += r[0] as f64;
                    acc[c][1] += r[1] as f64;
                    acc[c][2] += 1.0;
                }
            }
            for (c, a) in centers.iter_mut().zip(acc) {
                *c = [a[0] / a[2], a[1] / a[2]];
            }
        }
        for c in centers {
            let nearest = (0..4)
                .map(|e| {
                    let v = cb.vector(0, e);
                    ((v[0] as f64 - c[0]).powi(2) + (v[1] as f64 - c[1]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 0.1, "center {c:?} is {nearest} from its entry");
        }
    }

    #[test]
    fn files_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cb = CodebookSet::random(3, 16, 4, 1.0, &mut rng);
        let mut buf = vec![];
        cb.write_to(&mut buf).unwrap();
        assert_eq!(CodebookSet::read_from(&mut buf.as_slice()).unwrap(), cb);
        let g = TokenGrid::new(2, 3, 16, vec![1, 2, 3, 15, 0, 7]).unwrap();
        let mut buf = vec![];
        g.write_to(&mut buf).unwrap();
        assert_eq!(TokenGrid::read_from(&mut buf.as_slice()).unwrap(), g);
        assert!(TokenGrid::read_from(&mut &b"XXXX"[..]).is_err());
    }

    #[test]
    fn straight_through_value_and_gradient() {
        let mut g = Graph::<f64>::new();
        let mut p = duotts_nn::Params::new();
        let id = p.add("x", Tensor::from_vec(&[1, 2], vec![0.2, -0.4]));
        let x = g.param(&p, id);
        let (y, commit) = straight_through(&mut g, x, Tensor::from_vec(&[1, 2], vec![1.0, 0.0]), COMMIT_BETA);
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
        let w = g.constant(Tensor::from_vec(&[1, 2], vec![3.0, -2.0]));
        let m = g.mul(y, w);
        let l = g.sum(m);
        let grads = g.backward(l);
        assert_eq!(grads.param(id).unwrap().data(), &[3.0, -2.0]);
        let want = 0.25 * ((0.8f64).powi(2) + 0.4f64.powi(2)) / 2.0;
        assert!((g.value(commit).item() - want).abs() < 1e-15);

        let mut g = Graph::<f64>::new();
        let x = g.param(&p, id);
        let (_, commit) = straight_through(&mut g, x, p.get(id).clone(), COMMIT_BETA);
        assert_eq!(g.value(commit).item(), 0.0);
    }
}

//! The delay-pattern baseline: layer i shifted i-1 steps right so that N
//! parallel heads predict one column per step.

use crate::error::{Error, Result};
use crate::rvq::TokenGrid;

/// `codes[col * n_layers + layer]`; `None` marks padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayedGrid {
    pub n_layers: usize,
    pub n_entries: usize,
    pub n_cols: usize,
    pub codes: Vec<Option<u16>>,
}

impl DelayedGrid {
    pub fn get(&self, col: usize, layer: usize) -> Option<u16> {
        self.codes[col * self.n_layers + layer]
    }
}

pub fn apply_delay(g: &TokenGrid) -> DelayedGrid {
    let n = g.n_layers;
    let n_cols = if g.n_frames == 0 { 0 } else { g.n_frames + n - 1 };
    let mut codes = vec![None; n_cols * n];
    for t in 0..g.n_frames {
        for l in 0..n {
            codes[(t + l) * n + l] = Some(g.get(t, l));
        }
    }
    DelayedGrid {
        n_layers: n,
        n_entries: g.n_entries,
        n_cols,
        codes,
    }
}

pub fn unapply_delay(d: &DelayedGrid) -> Result<TokenGrid> {
    let n = d.n_layers;
    if d.n_cols == 0 {
        return Ok(TokenGrid::empty(n, d.n_entries));
    }
    if d.n_cols < n || d.codes.len() != d.n_cols * n {
        return Err(Error::invalid("delayed grid too short"));
    }
    let frames = d.n_cols + 1 - n;
    let mut codes = Vec::with_capacity(frames * n);
    for t in 0..frames {
        for l in 0..n {
            codes.push(d.get(t + l, l).ok_or_else(|| Error::invalid(format!("padding inside frame {t} layer {l}")))?);
        }
    }
    TokenGrid::new(frames, n, d.n_entries, codes)
}

/// Autoregressive steps until the first frame has all `n_layers` codes.
pub fn first_frame_steps(n_layers: usize) -> usize {
    n_layers
}

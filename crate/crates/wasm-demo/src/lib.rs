//! Browser bindings for the static demo in `www/`.

use duotts::corpus::render;
use duotts::engine::{benchmark_latency, Network, ScheduleMode};
use duotts::frontend::FrontendConfig;
use duotts::model::{apply_delay, DualModel, ModelConfig};
use duotts::oracle::{decode_text, identify_speaker};
use duotts::rvq::{bitrate_for, CodebookSet, TokenGrid};
use duotts::tokenizer::{TokenizerConfig, TokenizerModel};
use duotts::audio::AudioSignal;
use duotts_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js(e: duotts::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn bitrate(n_layers: usize, n_entries: usize, frame_rate_hz: f64) -> Result<f64, JsError> {
    bitrate_for(n_layers, n_entries, frame_rate_hz).map_err(js)
}

/// Mean squared residual after each layer, for clustered random frames.
/// Codebooks are k-means++-seeded on one draw and scored on a second one.
/// Index 0 is the input energy.
#[wasm_bindgen]
pub fn residual_curve(n_layers: usize, n_entries: usize, dim: usize, n_frames: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    if n_layers == 0 || dim == 0 || n_frames == 0 || !n_entries.is_power_of_two() {
        return Err(JsError::new("layers, dim and frames must be positive; entries a power of two"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<f32> = (0..16 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let draw = |rng: &mut ChaCha8Rng| {
        let mut data = Vec::with_capacity(n_frames * dim);
        for _ in 0..n_frames {
            let c = rng.random_range(0..16);
            data.extend((0..dim).map(|j| centres[c * dim + j] + 0.3 * rng.random_range(-1.0f32..1.0)));
        }
        Tensor::from_vec(&[n_frames, dim], data)
    };
    let fit = draw(&mut rng);
    let test = draw(&mut rng);
    let energy = test.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / n_frames as f64;
    let mut cb = CodebookSet::zeros(n_layers, n_entries, dim);
    cb.init_kmeanspp(&fit, &mut rng).map_err(js)?;
    let q = cb.quantize_frames(&test).map_err(js)?;
    Ok(std::iter::once(energy).chain(q.residual_norms).collect())
}

fn tiny_pair(n_layers: usize) -> Result<(DualModel, TokenizerModel), duotts::Error> {
    let mc = ModelConfig {
        n_layers,
        n_entries: 64,
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
        n_entries: 64,
        acoustic_dim: 8,
        adapter_dim: 4,
        frontend: FrontendConfig {
            d_latent: 8,
            ..FrontendConfig::default()
        },
        ..TokenizerConfig::default()
    };
    let mut tok = TokenizerModel::new(&tc, 0)?;
    tok.set_streaming();
    Ok((DualModel::new(&mc, 0)?, tok))
}

/// Runs `frames` frames through an untrained toy model in either schedule
/// and returns the trace as `[network, layer_or_chunk]` pairs, with network
/// 0 = backbone, 1 = decoder, 2 = acoustic decoder (audio out).
#[wasm_bindgen]
pub fn schedule_trace(delay: bool, n_layers: usize, frames: usize) -> Result<Vec<u32>, JsError> {
    if !(1..=16).contains(&n_layers) || !(1..=12).contains(&frames) {
        return Err(JsError::new("layers in 1..=16, frames in 1..=12"));
    }
    let (m, tok) = tiny_pair(n_layers).map_err(js)?;
    let mode = if delay { ScheduleMode::Delay } else { ScheduleMode::Dual };
    let (_, trace) = benchmark_latency(&m, &tok, mode, n_layers, &[1, 2], frames).map_err(js)?;
    Ok(trace
        .rows
        .iter()
        .flat_map(|r| {
            let net = match r.network {
                Network::Backbone => 0,
                Network::Decoder => 1,
                Network::Acoustic => 2,
            };
            [net, r.layer_or_chunk as u32]
        })
        .collect())
}

/// The delay-pattern layout of `frames` frames: for each column (one
/// backbone step) and layer, the frame whose code sits there, or -1.
#[wasm_bindgen]
pub fn delay_layout(n_layers: usize, frames: usize) -> Result<Vec<i32>, JsError> {
    let codes: Vec<u16> = (0..frames).flat_map(|t| std::iter::repeat_n(t as u16, n_layers)).collect();
    let g = TokenGrid::new(frames, n_layers, 1 << 16, codes).map_err(js)?;
    let d = apply_delay(&g);
    Ok((0..d.n_cols)
        .flat_map(|c| (0..n_layers).map(move |l| (c, l)))
        .map(|(c, l)| d.get(c, l).map_or(-1, i32::from))
        .collect())
}

/// Renders text tokens (0..64) in a voice (1..=5) of the synthetic corpus.
#[wasm_bindgen]
pub fn render_utterance(text: &[u16], speaker: u8) -> Result<Vec<f32>, JsError> {
    if text.iter().any(|t| *t >= 64) || !(1..=5).contains(&speaker) {
        return Err(JsError::new("text tokens must be below 64 and speaker in 1..=5"));
    }
    Ok(render(text, speaker).samples)
}

/// Matched-filter text oracle.
#[wasm_bindgen]
pub fn oracle_text(samples: &[f32]) -> Vec<u16> {
    decode_text(&AudioSignal::new(samples.to_vec()))
}

/// Speaker oracle; 0 when no voice is found.
#[wasm_bindgen]
pub fn oracle_speaker(samples: &[f32]) -> u8 {
    identify_speaker(&AudioSignal::new(samples.to_vec())).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitrate_and_residuals() {
        assert_eq!(bitrate(16, 2048, 12.5).unwrap(), 2200.0);
        let r = residual_curve(4, 16, 8, 200, 1).unwrap();
        assert_eq!(r.len(), 5);
        assert!(r.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn traces_show_first_packet_steps() {
        let dual = schedule_trace(false, 8, 2).unwrap();
        let first_audio = dual.chunks(2).position(|r| r[0] == 2).unwrap();
        assert_eq!(first_audio, 8);
        let delay = schedule_trace(true, 8, 2).unwrap();
        let rows: Vec<&[u32]> = delay.chunks(2).collect();
        assert!(rows[..8].iter().all(|r| r[0] == 0));
        assert_eq!(rows[8][0], 2);
        let layout = delay_layout(3, 2).unwrap();
        assert_eq!(layout, vec![0, -1, -1, 1, 0, -1, -1, 1, 0, -1, -1, 1]);
    }

    #[test]
    fn oracle_reads_rendered_text() {
        let a = render_utterance(&[3, 50, 7], 4).unwrap();
        assert_eq!(oracle_text(&a), vec![3, 50, 7]);
        assert_eq!(oracle_speaker(&a), 4);
        assert_eq!(oracle_speaker(&vec![0.0; 4000]), 0);
    }
}

/* tslint:disable */
/* eslint-disable */

export function bitrate(n_layers: number, n_entries: number, frame_rate_hz: number): number;

/**
 * The delay-pattern layout of `frames` frames: for each column (one
 * backbone step) and layer, the frame whose code sits there, or -1.
 */
export function delay_layout(n_layers: number, frames: number): Int32Array;

/**
 * Speaker oracle; 0 when no voice is found.
 */
export function oracle_speaker(samples: Float32Array): number;

/**
 * Matched-filter text oracle.
 */
export function oracle_text(samples: Float32Array): Uint16Array;

/**
 * Renders text tokens (0..64) in a voice (1..=5) of the synthetic corpus.
 */
export function render_utterance(text: Uint16Array, speaker: number): Float32Array;

/**
 * Mean squared residual after each layer, for clustered random frames.
 * Codebooks are k-means++-seeded on one draw and scored on a second one.
 * Index 0 is the input energy.
 */
export function residual_curve(n_layers: number, n_entries: number, dim: number, n_frames: number, seed: bigint): Float64Array;

/**
 * Runs `frames` frames through an untrained toy model in either schedule
 * and returns the trace as `[network, layer_or_chunk]` pairs, with network
 * 0 = backbone, 1 = decoder, 2 = acoustic decoder (audio out).
 */
export function schedule_trace(delay: boolean, n_layers: number, frames: number): Uint32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly bitrate: (a: number, b: number, c: number) => [number, number, number];
    readonly delay_layout: (a: number, b: number) => [number, number, number, number];
    readonly oracle_speaker: (a: number, b: number) => number;
    readonly oracle_text: (a: number, b: number) => [number, number];
    readonly render_utterance: (a: number, b: number, c: number) => [number, number, number, number];
    readonly residual_curve: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly schedule_trace: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;

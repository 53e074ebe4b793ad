/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const bitrate: (a: number, b: number, c: number) => [number, number, number];
export const delay_layout: (a: number, b: number) => [number, number, number, number];
export const oracle_speaker: (a: number, b: number) => number;
export const oracle_text: (a: number, b: number) => [number, number];
export const render_utterance: (a: number, b: number, c: number) => [number, number, number, number];
export const residual_curve: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
export const schedule_trace: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;

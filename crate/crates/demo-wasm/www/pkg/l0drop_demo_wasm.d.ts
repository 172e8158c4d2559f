/* tslint:disable */
/* eslint-disable */

/**
 * Dense-with-zeros attention next to the compacted count-softmax form on a
 * random source of length `n`.
 */
export function count_softmax_compare(n: number, d: number, heads: number, sparsity: number, seed: bigint): string;

/**
 * Closed-form and sampled HardConcrete gate statistics.
 */
export function hardconcrete_explorer(log_alpha: number, beta: number, eps: number, samples: number, seed: bigint): string;

/**
 * Keep/drop masks of a rule-based pattern over a small corpus.
 */
export function pattern_masks(corpus: string, pattern: string, coverage: number, drop_tags: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly count_softmax_compare: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
    readonly hardconcrete_explorer: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
    readonly pattern_masks: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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

/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const count_softmax_compare: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
export const hardconcrete_explorer: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
export const pattern_masks: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;

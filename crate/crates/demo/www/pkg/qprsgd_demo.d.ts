/* tslint:disable */
/* eslint-disable */

/**
 * Loss curves for the algorithms in a JSON request.
 */
export function convergenceCurves(request: string): string;

/**
 * Spectrum of a mixing matrix and the consensus decay of a random start.
 */
export function mixingDecay(topology_kind: string, workers: number, self_weight: number, steps: number, seed: bigint): string;

/**
 * Quantize `values` `draws` times and summarize the outcomes.
 */
export function quantizerDistribution(values: Float64Array, levels: number, draws: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly convergenceCurves: (a: number, b: number) => [number, number, number, number];
    readonly mixingDecay: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly quantizerDistribution: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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

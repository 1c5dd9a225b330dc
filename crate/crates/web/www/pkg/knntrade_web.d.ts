/* tslint:disable */
/* eslint-disable */

/**
 * Trains on the first half of a synthetic market and replays the second half.
 * Returns the pessimistic equity curve followed by the optimistic one.
 */
export function backtest_equity(seed: number, symbols: number, k: number, min_gain: number): Float64Array;

/**
 * Best-so-far objective per PSO iteration on the 2-d Rastrigin function.
 */
export function pso_trace(seed: number, particles: number, iterations: number): Float64Array;

/**
 * Accuracy on the training set and under leave-one-out for k = 1..=max_k, as
 * `[train_1, loocv_1, train_2, loocv_2, ...]`.
 */
export function validation_curve(seed: number, threshold: number, max_k: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly backtest_equity: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly pso_trace: (a: number, b: number, c: number) => [number, number, number, number];
    readonly validation_curve: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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

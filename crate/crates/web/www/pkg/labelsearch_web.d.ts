/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    k(): number;
    /**
     * Lowest-inertia k-means labeling over `n_runs` restarts, as JSON.
     */
    kmeans(n_runs: number, seed: bigint): string;
    /**
     * Draws a small certified fixture with `k` planted classes.
     */
    constructor(n: number, k: number, separation: number, seed: bigint);
    /**
     * Second-space points projected to 2D, flattened as x0, y0, x1, y1, ...
     */
    points(): Float64Array;
    /**
     * Trains one encoder and reports its labels, accuracy and objective
     * trace as JSON.
     */
    train(eta: number, gamma: number, iters: number, seed: bigint): string;
    truth(): Uint32Array;
}

/**
 * `sparsemax(logits / gamma)`.
 */
export function sparsemax_scaled(logits: Float64Array, gamma: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_k: (a: number) => number;
    readonly demo_kmeans: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly demo_new: (a: number, b: number, c: number, d: bigint) => [number, number, number];
    readonly demo_points: (a: number) => [number, number];
    readonly demo_train: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly demo_truth: (a: number) => [number, number];
    readonly sparsemax_scaled: (a: number, b: number, c: number) => [number, number, number, number];
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

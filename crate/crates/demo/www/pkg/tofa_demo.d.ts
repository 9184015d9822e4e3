/* tslint:disable */
/* eslint-disable */

/**
 * Per-layer cost of one config key as `layer macs params` rows, followed by
 * a `total` row.
 */
export function layer_costs(profile: string, key: string, classes: number): string;

/**
 * Learning rate at `points` evenly spaced iterations, as `iter lr` rows.
 */
export function lr_curve(total: number, warmup: number, base_lr: number, points: number): string;

/**
 * Names of the bundled search-space profiles, one per line.
 */
export function profiles(): string;

/**
 * `n` uniform samples from a profile plus its two anchors, as
 * `kind macs params key` rows with kind `min`, `max` or `sample`.
 */
export function sample_costs(profile: string, n: number, classes: number, seed: bigint): string;

/**
 * Runs the sandwich sampler for `iters` iterations without training,
 * recording the ledger, then selects one subnet per budget with each fixed
 * rule. Budgets are `rungs` evenly spaced flops values between the anchors.
 * Rows: `budget rule key flops index`, or `budget rule - - -` when nothing
 * fits.
 */
export function simulate_selection(profile: string, iters: number, rungs: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly layer_costs: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly lr_curve: (a: number, b: number, c: number, d: number) => [number, number];
    readonly profiles: () => [number, number];
    readonly sample_costs: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly simulate_selection: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
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

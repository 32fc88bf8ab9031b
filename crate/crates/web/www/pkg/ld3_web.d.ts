/* tslint:disable */
/* eslint-disable */

/**
 * Time grid of a heuristic (`uniform`, `quadratic`, `edm`, `logsnr`) as a
 * JSON array, from T down to t_min.
 */
export function heuristic_grid(kind: string, nfe: number): string;

/**
 * Mixture components as `[{weight, mean, var}]`, for drawing the target.
 */
export function mixture(): string;

/**
 * Runs LD3 on `count` teacher pairs and returns the learned grid with the
 * validation loss after each epoch.
 */
export function train_grid(family: string, nfe: number, count: number, epochs: number, seed: number): string;

/**
 * Solves `n` prior draws on the given grid and with the teacher.
 *
 * `times_c` may be an empty string, meaning the denoiser is queried at the
 * step times. Returns `{paths, teacher, rmsd}` where each path lists the
 * iterates from x_T to the output.
 */
export function trajectories(family: string, times: string, times_c: string, n: number, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly heuristic_grid: (a: number, b: number, c: number) => [number, number, number, number];
    readonly mixture: () => [number, number];
    readonly train_grid: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly trajectories: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
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

/* tslint:disable */
/* eslint-disable */

/**
 * A prediction scored against its ground-truth slice.
 */
export class Comparison {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Absolute error, scaled so 0.25 is white.
     */
    error_rgba(): Uint8Array;
    prediction_rgba(): Uint8Array;
    psnr(): number;
    ssim(): number;
    ssim_map_mean(): number;
    /**
     * Local SSIM, black at 0 (or below) and white at 1.
     */
    ssim_map_rgba(): Uint8Array;
    target_rgba(): Uint8Array;
}

/**
 * A synthetic volume held on the Rust side.
 */
export class Phantom {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Predict slice `index` from `index - k` and `index + k`.
     * `method` is `"linear"`, `"nearest"` or `"nearest-upper"`.
     */
    interpolate(index: number, k: number, method: string): Comparison;
    n_slices(): number;
    constructor(seed: bigint, size: number, n_slices: number);
    /**
     * Slice `index` pushed forward to diffusion step `t` with a seeded noise draw.
     */
    noised_rgba(index: number, schedule: Schedule, t: number, seed: bigint): Uint8Array;
    size(): number;
    slice_rgba(index: number): Uint8Array;
}

/**
 * Linear beta schedule.
 */
export class Schedule {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * `abar_1 ..= abar_T`.
     */
    alpha_bars(): Float64Array;
    /**
     * `beta_1 ..= beta_T`.
     */
    betas(): Float64Array;
    constructor(timesteps: number, beta_start: number, beta_end: number);
    /**
     * Signal-to-noise ratio `abar / (1 - abar)` in dB at step `t`.
     */
    snr_db(t: number): number;
    timesteps(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_comparison_free: (a: number, b: number) => void;
    readonly __wbg_phantom_free: (a: number, b: number) => void;
    readonly __wbg_schedule_free: (a: number, b: number) => void;
    readonly comparison_error_rgba: (a: number) => [number, number];
    readonly comparison_prediction_rgba: (a: number) => [number, number];
    readonly comparison_psnr: (a: number) => number;
    readonly comparison_ssim: (a: number) => number;
    readonly comparison_ssim_map_mean: (a: number) => number;
    readonly comparison_ssim_map_rgba: (a: number) => [number, number];
    readonly comparison_target_rgba: (a: number) => [number, number];
    readonly phantom_interpolate: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly phantom_n_slices: (a: number) => number;
    readonly phantom_new: (a: bigint, b: number, c: number) => [number, number, number];
    readonly phantom_noised_rgba: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly phantom_size: (a: number) => number;
    readonly phantom_slice_rgba: (a: number, b: number) => [number, number, number, number];
    readonly schedule_alpha_bars: (a: number) => [number, number];
    readonly schedule_betas: (a: number) => [number, number];
    readonly schedule_new: (a: number, b: number, c: number) => [number, number, number];
    readonly schedule_snr_db: (a: number, b: number) => [number, number, number];
    readonly schedule_timesteps: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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

/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_comparison_free: (a: number, b: number) => void;
export const __wbg_phantom_free: (a: number, b: number) => void;
export const __wbg_schedule_free: (a: number, b: number) => void;
export const comparison_error_rgba: (a: number) => [number, number];
export const comparison_prediction_rgba: (a: number) => [number, number];
export const comparison_psnr: (a: number) => number;
export const comparison_ssim: (a: number) => number;
export const comparison_ssim_map_mean: (a: number) => number;
export const comparison_ssim_map_rgba: (a: number) => [number, number];
export const comparison_target_rgba: (a: number) => [number, number];
export const phantom_interpolate: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const phantom_n_slices: (a: number) => number;
export const phantom_new: (a: bigint, b: number, c: number) => [number, number, number];
export const phantom_noised_rgba: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
export const phantom_size: (a: number) => number;
export const phantom_slice_rgba: (a: number, b: number) => [number, number, number, number];
export const schedule_alpha_bars: (a: number) => [number, number];
export const schedule_betas: (a: number) => [number, number];
export const schedule_new: (a: number, b: number, c: number) => [number, number, number];
export const schedule_snr_db: (a: number, b: number) => [number, number, number];
export const schedule_timesteps: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;

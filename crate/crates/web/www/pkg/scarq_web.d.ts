/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    depth(): number;
    /**
     * `variant` is one of `exp`, `expit`, `exp-norm`, `expit-norm`; `scar`
     * picks the scar channel over the normal one.
     */
    dpm(variant: string, scar: boolean, z: number): Float64Array;
    dtm(beta: number, z: number): Float64Array;
    height(): number;
    intensity(z: number): Float64Array;
    labels(z: number): Float64Array;
    constructor(size: number, seed: number);
    penalty(beta: number, dx: number, dy: number, z: number): Float64Array;
    penalty_total(beta: number, dx: number, dy: number): number;
    width(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_depth: (a: number) => number;
    readonly demo_dpm: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_dtm: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_height: (a: number) => number;
    readonly demo_intensity: (a: number, b: number) => [number, number];
    readonly demo_labels: (a: number, b: number) => [number, number];
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_penalty: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_penalty_total: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly demo_width: (a: number) => number;
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

/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Runs both plugins on image `i`, alongside what the generator planted.
     */
    analyze(i: number): string;
    cols(): number;
    image_count(): number;
    /**
     * A site holding `patients` phantom patients with two views each.
     */
    constructor(seed: number, patients: number);
    /**
     * Parses and runs a query; returns canonical text and rows, or the error.
     */
    query(text: string): string;
    /**
     * Image `i` as RGBA bytes for a canvas.
     */
    rgba(i: number): Uint8Array;
    rows(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_analyze: (a: number, b: number) => [number, number, number, number];
    readonly demo_cols: (a: number) => number;
    readonly demo_image_count: (a: number) => number;
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_query: (a: number, b: number, c: number) => [number, number];
    readonly demo_rgba: (a: number, b: number) => [number, number, number, number];
    readonly demo_rows: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
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

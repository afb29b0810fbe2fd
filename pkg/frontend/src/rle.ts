import type { RleMask } from "./types.js";

export class RleFormatError extends Error {
  name = "RleFormatError";
}

/**
 * Decode a column-major run-length mask (leading zero-run) into a flat
 * row-major Uint8Array of 0/1 of length h*w. Matches the service codec:
 * runs walk down columns, so flat column-major index i maps to
 * (y = i % h, x = floor(i / h)).
 */
export function rleDecode(rle: RleMask, h: number, w: number): Uint8Array {
  const total = rle.counts.reduce((a, b) => a + b, 0);
  if (total !== h * w) {
    throw new RleFormatError(`count sum ${total} != ${h}*${w}`);
  }
  const out = new Uint8Array(h * w);
  let pos = 0;
  let value = 0;
  for (const run of rle.counts) {
    if (run < 0) throw new RleFormatError(`negative run ${run}`);
    if (value === 1) {
      for (let i = pos; i < pos + run; i++) {
        const y = i % h;
        const x = (i - y) / h;
        out[y * w + x] = 1;
      }
    }
    pos += run;
    value ^= 1;
  }
  return out;
}

/** Encode a row-major 0/1 mask into the same wire format (test utility). */
export function rleEncode(mask: Uint8Array, h: number, w: number): RleMask {
  const counts: number[] = [];
  let current = 0;
  let run = 0;
  for (let i = 0; i < h * w; i++) {
    const y = i % h;
    const x = (i - y) / h;
    const v = mask[y * w + x] ? 1 : 0;
    if (v === current) {
      run += 1;
    } else {
      counts.push(run);
      current = v;
      run = 1;
    }
  }
  counts.push(run);
  return { size: [h, w], counts };
}

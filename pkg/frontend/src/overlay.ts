import { rleDecode } from "./rle.js";
import type { PromptResult } from "./types.js";

export interface Overlay {
  id: number;
  mask: Uint8Array; // row-major 0/1, image dims
  width: number;
  height: number;
  color: [number, number, number];
  label: string;
  score: number;
  iouPred: number;
  visible: boolean;
  flags: { fallback_box: boolean; degenerate_mask: boolean };
}

const PALETTE: [number, number, number][] = [
  [66, 133, 244],
  [219, 68, 55],
  [244, 180, 0],
  [15, 157, 88],
  [171, 71, 188],
  [0, 172, 193],
  [255, 112, 67],
  [158, 157, 36],
];

export function overlayColor(id: number): [number, number, number] {
  return PALETTE[id % PALETTE.length];
}

/** Decode one service result into an overlay record (pure; no canvas). */
export function overlayFromResult(
  id: number,
  result: PromptResult,
  width: number,
  height: number,
): Overlay {
  return {
    id,
    mask: rleDecode(result.mask_rle, height, width),
    width,
    height,
    color: overlayColor(id),
    label: result.label,
    score: result.score,
    iouPred: result.iou_pred,
    visible: true,
    flags: result.flags,
  };
}

/**
 * Rasterize an overlay into an RGBA buffer (premultiplied by nothing;
 * alpha-only tint). Pixel-exact w.r.t. the decoded mask.
 */
export function overlayToRgba(overlay: Overlay, alpha = 140): Uint8ClampedArray {
  const { mask, width, height, color } = overlay;
  const buf = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < width * height; i++) {
    if (mask[i]) {
      buf[i * 4] = color[0];
      buf[i * 4 + 1] = color[1];
      buf[i * 4 + 2] = color[2];
      buf[i * 4 + 3] = alpha;
    }
  }
  return buf;
}

/** Centroid of the mask's true pixels (label anchor), null when empty. */
export function maskCentroid(
  mask: Uint8Array,
  width: number,
  height: number,
): { x: number; y: number } | null {
  let sx = 0;
  let sy = 0;
  let n = 0;
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      if (mask[y * width + x]) {
        sx += x;
        sy += y;
        n += 1;
      }
    }
  }
  if (n === 0) return null;
  return { x: sx / n, y: sy / n };
}

/** Overlay bookkeeping: one overlay per completed prompt, removable. */
export class OverlayStore {
  private overlays: Overlay[] = [];
  private nextId = 0;

  add(result: PromptResult, width: number, height: number): Overlay {
    const overlay = overlayFromResult(this.nextId++, result, width, height);
    this.overlays.push(overlay);
    return overlay;
  }

  remove(id: number): void {
    this.overlays = this.overlays.filter((o) => o.id !== id);
  }

  toggle(id: number): void {
    const o = this.overlays.find((o) => o.id === id);
    if (o) o.visible = !o.visible;
  }

  clear(): void {
    this.overlays = [];
  }

  list(): readonly Overlay[] {
    return this.overlays;
  }

  /** Highlight = visible only those with the given label (null resets). */
  highlightLabel(label: string | null): void {
    for (const o of this.overlays) {
      o.visible = label === null || o.label === label;
    }
  }
}

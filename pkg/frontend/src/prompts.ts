import { canvasToImage, insideImage, type ViewTransform } from "./transform.js";
import type { WirePrompt } from "./types.js";

const DRAG_THRESHOLD_PX = 4; // canvas px before a press becomes a box drag

export interface DraftState {
  startX: number; // image coords
  startY: number;
  lastX: number;
  lastY: number;
  background: boolean; // shift-click marks a background point
  dragging: boolean;
}

/**
 * Pointer state machine: press starts a draft, movement past a threshold
 * turns it into a box drag, release completes either a point or a box.
 * Incomplete or out-of-bounds drafts never produce a prompt.
 */
export class PromptDraft {
  private draft: DraftState | null = null;
  private imageW = 0;
  private imageH = 0;

  setImageSize(w: number, h: number): void {
    this.imageW = w;
    this.imageH = h;
    this.draft = null;
  }

  get active(): DraftState | null {
    return this.draft;
  }

  pointerDown(t: ViewTransform, cx: number, cy: number, shift: boolean): void {
    const { x, y } = canvasToImage(t, cx, cy);
    if (!insideImage(x, y, this.imageW, this.imageH)) {
      this.draft = null;
      return;
    }
    this.draft = {
      startX: x,
      startY: y,
      lastX: x,
      lastY: y,
      background: shift,
      dragging: false,
    };
  }

  pointerMove(t: ViewTransform, cx: number, cy: number): void {
    if (!this.draft) return;
    const { x, y } = canvasToImage(t, cx, cy);
    this.draft.lastX = Math.min(Math.max(x, 0), this.imageW);
    this.draft.lastY = Math.min(Math.max(y, 0), this.imageH);
    const dx = Math.abs(this.draft.lastX - this.draft.startX) * t.zoom;
    const dy = Math.abs(this.draft.lastY - this.draft.startY) * t.zoom;
    if (dx >= DRAG_THRESHOLD_PX || dy >= DRAG_THRESHOLD_PX) {
      this.draft.dragging = true;
    }
  }

  /** Completes the draft; returns the wire prompt or null (no request). */
  pointerUp(t: ViewTransform, cx: number, cy: number): WirePrompt | null {
    const draft = this.draft;
    this.draft = null;
    if (!draft) return null;
    this.pointerMoveInto(draft, t, cx, cy);
    if (draft.dragging) {
      const x1 = Math.min(draft.startX, draft.lastX);
      const y1 = Math.min(draft.startY, draft.lastY);
      const x2 = Math.max(draft.startX, draft.lastX);
      const y2 = Math.max(draft.startY, draft.lastY);
      if (x2 - x1 < 1 || y2 - y1 < 1) return null; // degenerate box
      return { type: "box", x1, y1, x2, y2 };
    }
    return {
      type: "point",
      x: draft.startX,
      y: draft.startY,
      is_fg: !draft.background,
    };
  }

  cancel(): void {
    this.draft = null;
  }

  private pointerMoveInto(draft: DraftState, t: ViewTransform, cx: number, cy: number): void {
    const { x, y } = canvasToImage(t, cx, cy);
    draft.lastX = Math.min(Math.max(x, 0), this.imageW);
    draft.lastY = Math.min(Math.max(y, 0), this.imageH);
    const dx = Math.abs(draft.lastX - draft.startX) * t.zoom;
    const dy = Math.abs(draft.lastY - draft.startY) * t.zoom;
    if (dx >= DRAG_THRESHOLD_PX || dy >= DRAG_THRESHOLD_PX) {
      draft.dragging = true;
    }
  }
}

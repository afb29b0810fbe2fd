/** Wire types for the segmentation service. */

export interface RleMask {
  size: [number, number]; // [H, W]
  counts: number[]; // alternating run lengths, leading zero-run, column-major
}

export interface PointPrompt {
  type: "point";
  x: number;
  y: number;
  is_fg?: boolean;
}

export interface BoxPrompt {
  type: "box";
  x1: number;
  y1: number;
  x2: number;
  y2: number;
}

export type WirePrompt = PointPrompt | BoxPrompt;

export interface SegmentRequest {
  image?: string; // base64 PNG
  sample_id?: number;
  prompts: WirePrompt[];
  topk?: number;
  fusion?: boolean;
}

export interface TopkEntry {
  label: string;
  score: number;
}

export interface PromptResult {
  mask_rle: RleMask;
  box: [number, number, number, number];
  label: string;
  score: number;
  iou_pred: number;
  topk: TopkEntry[];
  flags: { fallback_box: boolean; degenerate_mask: boolean };
}

export interface SegmentResponse {
  width: number;
  height: number;
  results: PromptResult[];
}

export interface ClassEntry {
  id: number;
  name: string;
  is_base: boolean;
}

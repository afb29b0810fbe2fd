/**
 * Canvas <-> image coordinate mapping. The image is drawn at integer zoom
 * with a pixel offset; the transform is exactly invertible at integer
 * zoom levels, which keeps prompt coordinates pixel-accurate.
 */
export interface ViewTransform {
  zoom: number; // integer >= 1
  offsetX: number; // canvas px of image origin
  offsetY: number;
}

export function canvasToImage(
  t: ViewTransform,
  cx: number,
  cy: number,
): { x: number; y: number } {
  return { x: (cx - t.offsetX) / t.zoom, y: (cy - t.offsetY) / t.zoom };
}

export function imageToCanvas(
  t: ViewTransform,
  ix: number,
  iy: number,
): { x: number; y: number } {
  return { x: ix * t.zoom + t.offsetX, y: iy * t.zoom + t.offsetY };
}

export function insideImage(
  x: number,
  y: number,
  width: number,
  height: number,
): boolean {
  return x >= 0 && y >= 0 && x <= width && y <= height;
}

/** Centered fit at the largest integer zoom that fits the canvas. */
export function fitTransform(
  imageW: number,
  imageH: number,
  canvasW: number,
  canvasH: number,
): ViewTransform {
  const zoom = Math.max(1, Math.floor(Math.min(canvasW / imageW, canvasH / imageH)));
  return {
    zoom,
    offsetX: Math.floor((canvasW - imageW * zoom) / 2),
    offsetY: Math.floor((canvasH - imageH * zoom) / 2),
  };
}

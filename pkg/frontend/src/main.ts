import { ApiClient, ServiceError } from "./api.js";
import { maskCentroid, OverlayStore, overlayToRgba } from "./overlay.js";
import { PromptDraft } from "./prompts.js";
import { fitTransform, imageToCanvas, type ViewTransform } from "./transform.js";
import type { ClassEntry, WirePrompt } from "./types.js";

const api = new ApiClient("");
const overlays = new OverlayStore();
const draft = new PromptDraft();

const canvas = document.getElementById("view") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const classPanel = document.getElementById("classes")!;
const statusBar = document.getElementById("status")!;
const sampleInput = document.getElementById("sample-id") as HTMLInputElement;
const fileInput = document.getElementById("file") as HTMLInputElement;

let image: HTMLImageElement | null = null;
let imageB64: string | null = null; // uploads are sent inline
let sampleId: number | null = 0;
let view: ViewTransform = { zoom: 1, offsetX: 0, offsetY: 0 };
let highlighted: string | null = null;

function toast(message: string): void {
  statusBar.textContent = message;
  statusBar.classList.add("error");
  setTimeout(() => statusBar.classList.remove("error"), 4000);
}

function info(message: string): void {
  statusBar.textContent = message;
}

function render(): void {
  ctx.fillStyle = "#181a1f";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  if (!image) return;
  ctx.imageSmoothingEnabled = false; // nearest-neighbor: pixel-accurate zoom
  ctx.drawImage(
    image,
    view.offsetX,
    view.offsetY,
    image.naturalWidth * view.zoom,
    image.naturalHeight * view.zoom,
  );
  for (const o of overlays.list()) {
    if (!o.visible) continue;
    const tile = document.createElement("canvas");
    tile.width = o.width;
    tile.height = o.height;
    const tctx = tile.getContext("2d")!;
    const rgba = new Uint8ClampedArray(overlayToRgba(o)); // fresh ArrayBuffer for ImageData
    tctx.putImageData(new ImageData(rgba, o.width, o.height), 0, 0);
    ctx.drawImage(tile, view.offsetX, view.offsetY, o.width * view.zoom, o.height * view.zoom);
    const c = maskCentroid(o.mask, o.width, o.height);
    if (c) {
      const p = imageToCanvas(view, c.x, c.y);
      ctx.font = "13px system-ui";
      ctx.fillStyle = "#fff";
      ctx.strokeStyle = "#000";
      ctx.lineWidth = 3;
      const text = `${o.label} ${(o.score * 100).toFixed(0)}%`;
      ctx.strokeText(text, p.x, p.y);
      ctx.fillText(text, p.x, p.y);
    }
  }
  const d = draft.active;
  if (d && d.dragging) {
    const a = imageToCanvas(view, Math.min(d.startX, d.lastX), Math.min(d.startY, d.lastY));
    const b = imageToCanvas(view, Math.max(d.startX, d.lastX), Math.max(d.startY, d.lastY));
    ctx.strokeStyle = "#ffd54f";
    ctx.setLineDash([5, 3]);
    ctx.strokeRect(a.x, a.y, b.x - a.x, b.y - a.y);
    ctx.setLineDash([]);
  }
}

async function sendPrompt(prompt: WirePrompt): Promise<void> {
  if (!image) return;
  const token = api.newToken();
  info("segmenting…");
  try {
    const req = imageB64
      ? { image: imageB64, prompts: [prompt] }
      : { sample_id: sampleId ?? 0, prompts: [prompt] };
    const resp = await api.segment(req, token);
    if (resp === null) return; // superseded by a newer prompt
    const overlay = overlays.add(resp.results[0], resp.width, resp.height);
    info(
      `${overlay.label} (score ${(overlay.score * 100).toFixed(1)}%, ` +
        `mask confidence ${(overlay.iouPred * 100).toFixed(0)}%)`,
    );
    render();
  } catch (e) {
    toast(e instanceof ServiceError ? e.message : `request failed: ${e}`);
  }
}

function renderClasses(classes: ClassEntry[]): void {
  classPanel.innerHTML = "";
  for (const c of classes) {
    const row = document.createElement("div");
    row.className = `class-row ${c.is_base ? "base" : "novel"}`;
    row.innerHTML = `<span class="badge">${c.is_base ? "base" : "novel"}</span> ${c.name}`;
    row.onclick = () => {
      highlighted = highlighted === c.name ? null : c.name;
      overlays.highlightLabel(highlighted);
      render();
    };
    classPanel.appendChild(row);
  }
}

async function loadClasses(): Promise<void> {
  try {
    renderClasses(await api.classes());
  } catch {
    const retry = document.createElement("button");
    retry.textContent = "service unreachable — retry";
    retry.onclick = () => void loadClasses();
    classPanel.innerHTML = "";
    classPanel.appendChild(retry);
  }
}

function showImage(src: string, b64: string | null, sample: number | null): void {
  const img = new Image();
  img.onload = () => {
    image = img;
    imageB64 = b64;
    sampleId = sample;
    overlays.clear();
    draft.setImageSize(img.naturalWidth, img.naturalHeight);
    view = fitTransform(img.naturalWidth, img.naturalHeight, canvas.width, canvas.height);
    info(`loaded ${img.naturalWidth}x${img.naturalHeight}`);
    render();
  };
  img.onerror = () => toast("could not load image");
  img.src = src;
}

canvas.addEventListener("pointerdown", (e) => {
  const r = canvas.getBoundingClientRect();
  draft.pointerDown(view, e.clientX - r.left, e.clientY - r.top, e.shiftKey);
});
canvas.addEventListener("pointermove", (e) => {
  const r = canvas.getBoundingClientRect();
  draft.pointerMove(view, e.clientX - r.left, e.clientY - r.top);
  if (draft.active?.dragging) render();
});
canvas.addEventListener("pointerup", (e) => {
  const r = canvas.getBoundingClientRect();
  const prompt = draft.pointerUp(view, e.clientX - r.left, e.clientY - r.top);
  if (prompt) void sendPrompt(prompt);
});
canvas.addEventListener("pointerleave", () => draft.cancel());

document.getElementById("load-sample")!.addEventListener("click", () => {
  const n = parseInt(sampleInput.value || "0", 10);
  showImage(api.sampleUrl(n), null, n);
});
document.getElementById("clear")!.addEventListener("click", () => {
  overlays.clear();
  render();
});
fileInput.addEventListener("change", () => {
  const f = fileInput.files?.[0];
  if (!f) return;
  const reader = new FileReader();
  reader.onload = () => {
    const url = reader.result as string;
    showImage(url, url.split(",", 2)[1], null);
  };
  reader.readAsDataURL(f);
});

void loadClasses();
showImage(api.sampleUrl(0), null, 0);

/** DOM rendering: top-k grid, percentile sparkline, stroke recolouring.
 *
 * Rendering never invents numbers: the grid shows exactly the response's
 * top-k ids in order, the sparkline plots exactly the stored percentiles,
 * and stroke colours follow the selector's probabilities with a band
 * boundary at 0.5.
 */

import { ApiClient } from "./api.js";
import { Point, strokeBand } from "./geometry.js";
import { SessionStore } from "./store.js";
import { decodePgm, get2d, paintPgm } from "./pgm.js";

export function renderTopk(grid: HTMLElement, topk: number[], api: ApiClient): void {
  grid.textContent = "";
  for (const id of topk) {
    const cell = document.createElement("figure");
    cell.className = "thumb";
    cell.dataset.instanceId = String(id);
    const canvas = document.createElement("canvas");
    canvas.className = "thumb-canvas";
    const caption = document.createElement("figcaption");
    caption.textContent = `#${id}`;
    cell.append(canvas, caption);
    grid.append(cell);
    api.fetchPhoto(id)
      .then((buf) => paintPgm(canvas, decodePgm(buf)))
      .catch(() => undefined);
  }
}

export function renderSparkline(svg: SVGSVGElement, percentiles: number[]): void {
  const w = 220;
  const h = 60;
  svg.setAttribute("viewBox", `0 0 ${w} ${h}`);
  const old = svg.querySelector("polyline");
  if (old) old.remove();
  const line = document.createElementNS("http://www.w3.org/2000/svg", "polyline");
  const n = percentiles.length;
  const pts = percentiles.map((p, i) => {
    const x = n > 1 ? (w * i) / (n - 1) : 0;
    const y = h - (h * p) / 100;
    return `${x.toFixed(1)},${y.toFixed(1)}`;
  });
  line.setAttribute("points", pts.join(" "));
  line.setAttribute("fill", "none");
  line.setAttribute("stroke", "#2563eb");
  line.setAttribute("stroke-width", "2");
  svg.dataset.values = percentiles.map((p) => p.toFixed(4)).join(",");
  svg.append(line);
}

export const BAND_COLORS = { kept: "#1f2937", noise: "#dc2626" } as const;

export function renderStrokes(canvas: HTMLCanvasElement, strokes: Point[][],
                              selectProbs: number[]): void {
  const ctx = get2d(canvas);
  if (!ctx) return;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  strokes.forEach((stroke, i) => {
    ctx.strokeStyle = BAND_COLORS[strokeBand(selectProbs[i])];
    ctx.lineWidth = 2;
    ctx.beginPath();
    stroke.forEach(([x, y], k) => {
      const px = x * (canvas.width - 1);
      const py = y * (canvas.height - 1);
      if (k === 0) ctx.moveTo(px, py);
      else ctx.lineTo(px, py);
    });
    ctx.stroke();
  });
}

export function renderStatus(el: HTMLElement, store: SessionStore): void {
  const latest = store.latest();
  if (store.offline) {
    el.textContent = "network failure — stroke buffered, press retry";
    el.className = "status offline";
    return;
  }
  el.className = "status";
  if (!latest) {
    el.textContent = store.targetId === null
      ? "draw to search"
      : `draw instance #${store.targetId}`;
    return;
  }
  const pct = latest.rank_percentile;
  const retr = latest.retrievability;
  el.textContent =
    `strokes: ${store.strokes.length}` +
    (latest.rank !== null ? ` | target rank ${latest.rank}` : "") +
    (pct !== null ? ` | percentile ${pct.toFixed(1)}` : "") +
    (retr !== null ? ` | retrievability ${retr.toFixed(3)}` : "");
}

/** Browser entry point: pointer capture wired to the session store. */

import { ApiClient } from "./api.js";
import { Point } from "./geometry.js";
import { SessionStore } from "./store.js";
import { decodePgm, get2d, paintPgm } from "./pgm.js";
import { renderSparkline, renderStatus, renderStrokes, renderTopk } from "./view.js";

export async function boot(root: Document = document): Promise<SessionStore> {
  const api = new ApiClient("");
  const store = new SessionStore(api);

  const canvas = root.getElementById("draw") as HTMLCanvasElement;
  const grid = root.getElementById("topk") as HTMLElement;
  const spark = root.getElementById("sparkline") as unknown as SVGSVGElement;
  const status = root.getElementById("status") as HTMLElement;
  const target = root.getElementById("target") as HTMLCanvasElement;
  const undoBtn = root.getElementById("undo") as HTMLButtonElement;
  const retryBtn = root.getElementById("retry") as HTMLButtonElement;
  const newBtn = root.getElementById("new-target") as HTMLButtonElement;

  const repaint = () => {
    renderStrokes(canvas, store.strokes, store.selectProbs());
    const latest = store.latest();
    renderTopk(grid, latest ? latest.topk : [], api);
    renderSparkline(spark, store.percentiles());
    renderStatus(status, store);
    retryBtn.hidden = !store.offline;
  };
  store.onChange(repaint);

  let ids: number[] = [];
  try {
    ids = (await api.listGallery()).instance_ids;
  } catch {
    status.textContent = "service unreachable";
    return store;
  }

  const pickTarget = async () => {
    const id = ids[Math.floor(Math.random() * ids.length)];
    await store.start(id);
    try {
      paintPgm(target, decodePgm(await api.fetchPhoto(id)));
    } catch {
      /* thumbnail is decorative */
    }
    repaint();
  };

  let current: Point[] = [];
  let drawing = false;
  canvas.addEventListener("pointerdown", (e) => {
    drawing = true;
    current = [[e.offsetX, e.offsetY]];
    canvas.setPointerCapture(e.pointerId);
  });
  canvas.addEventListener("pointermove", (e) => {
    if (!drawing) return;
    current.push([e.offsetX, e.offsetY]);
    const ctx = get2d(canvas);
    if (ctx && current.length >= 2) {
      const [x0, y0] = current[current.length - 2];
      ctx.strokeStyle = "#6b7280";
      ctx.beginPath();
      ctx.moveTo(x0, y0);
      ctx.lineTo(e.offsetX, e.offsetY);
      ctx.stroke();
    }
  });
  canvas.addEventListener("pointerup", () => {
    if (!drawing) return;
    drawing = false;
    if (current.length >= 2) {
      store.submitPointerStroke(current, canvas.width, canvas.height)
        .catch(() => undefined);
    }
    current = [];
  });

  undoBtn.addEventListener("click", () => {
    store.undo().catch(() => undefined);
  });
  retryBtn.addEventListener("click", () => {
    store.retryPending().catch(() => undefined);
  });
  newBtn.addEventListener("click", () => {
    pickTarget().catch(() => undefined);
  });

  await pickTarget();
  return store;
}

declare global {
  interface Window {
    sketchlabBoot?: Promise<SessionStore>;
  }
}

if (typeof window !== "undefined" && typeof document !== "undefined"
    && document.getElementById("draw")) {
  window.sketchlabBoot = boot();
}

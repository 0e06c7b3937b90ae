/** Binary PGM (P5) decoding: the service serves gallery photos in this format. */

export interface PgmImage {
  width: number;
  height: number;
  /** row-major grayscale bytes, 0..255 */
  pixels: Uint8Array;
}

export function decodePgm(raw: ArrayBuffer): PgmImage {
  const bytes = new Uint8Array(raw);
  const fields: string[] = [];
  let pos = 0;
  while (fields.length < 4) {
    while (pos < bytes.length && isSpace(bytes[pos])) pos++;
    if (bytes[pos] === 0x23) { // '#' comment
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      continue;
    }
    const start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos])) pos++;
    fields.push(String.fromCharCode(...bytes.subarray(start, pos)));
  }
  pos++; // the single whitespace after maxval
  if (fields[0] !== "P5") throw new Error("not a binary PGM (P5) stream");
  const width = parseInt(fields[1], 10);
  const height = parseInt(fields[2], 10);
  const maxval = parseInt(fields[3], 10);
  const pixels = bytes.subarray(pos, pos + width * height);
  if (pixels.length !== width * height) throw new Error("truncated PGM payload");
  const scaled = maxval === 255
    ? new Uint8Array(pixels)
    : Uint8Array.from(pixels, (v) => Math.round((v * 255) / maxval));
  return { width, height, pixels: scaled };
}

function isSpace(b: number): boolean {
  return b === 0x20 || b === 0x09 || b === 0x0a || b === 0x0d;
}

let canvasSupported = true;

/** getContext("2d") that tolerates canvas-less environments (jsdom). */
export function get2d(canvas: HTMLCanvasElement): CanvasRenderingContext2D | null {
  if (!canvasSupported) return null;
  try {
    return canvas.getContext("2d");
  } catch {
    canvasSupported = false;
    return null;
  }
}

/** Paint a decoded PGM onto a canvas (ink is bright in the source: invert). */
export function paintPgm(canvas: HTMLCanvasElement, img: PgmImage): void {
  canvas.width = img.width;
  canvas.height = img.height;
  const ctx = get2d(canvas);
  if (!ctx) return; // environments without canvas rendering (tests)
  const data = ctx.createImageData(img.width, img.height);
  for (let i = 0; i < img.pixels.length; i++) {
    const v = 255 - img.pixels[i];
    data.data[4 * i] = v;
    data.data[4 * i + 1] = v;
    data.data[4 * i + 2] = v;
    data.data[4 * i + 3] = 255;
  }
  ctx.putImageData(data, 0, 0);
}

/** Pointer-sample geometry: normalisation and arc-length resampling. */

export type Point = [number, number];

export const MAX_POINTS = 64;

/** Map raw pointer samples (canvas pixels) into the unit square. */
export function normalize(samples: Point[], width: number, height: number): Point[] {
  return samples.map(([x, y]) => [
    Math.min(1, Math.max(0, x / Math.max(width - 1, 1))),
    Math.min(1, Math.max(0, y / Math.max(height - 1, 1))),
  ]);
}

function arcLengths(points: Point[]): number[] {
  const acc = [0];
  for (let i = 1; i < points.length; i++) {
    const dx = points[i][0] - points[i - 1][0];
    const dy = points[i][1] - points[i - 1][1];
    acc.push(acc[i - 1] + Math.hypot(dx, dy));
  }
  return acc;
}

/**
 * Resample a polyline by arc length to at most `maxPoints` points.
 * Endpoints are preserved; short strokes pass through unchanged.
 */
export function resample(points: Point[], maxPoints: number = MAX_POINTS): Point[] {
  if (points.length <= maxPoints) return points.slice();
  const acc = arcLengths(points);
  const total = acc[acc.length - 1];
  if (total === 0) return [points[0], points[points.length - 1]];
  const out: Point[] = [];
  let seg = 0;
  for (let k = 0; k < maxPoints; k++) {
    const target = (total * k) / (maxPoints - 1);
    while (seg < points.length - 2 && acc[seg + 1] < target) seg++;
    const span = acc[seg + 1] - acc[seg];
    const t = span > 0 ? (target - acc[seg]) / span : 0;
    out.push([
      points[seg][0] + t * (points[seg + 1][0] - points[seg][0]),
      points[seg][1] + t * (points[seg + 1][1] - points[seg][1]),
    ]);
  }
  return out;
}

/** Colour band for a stroke's select probability (noise warning below 0.5). */
export function strokeBand(selectProb: number | undefined): "kept" | "noise" {
  if (selectProb === undefined) return "kept";
  return selectProb >= 0.5 ? "kept" : "noise";
}

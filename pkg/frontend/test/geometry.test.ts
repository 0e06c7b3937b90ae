import { describe, expect, it } from "vitest";

import { MAX_POINTS, Point, normalize, resample, strokeBand } from "../src/geometry.js";

describe("normalize", () => {
  it("maps pixel samples into the unit square", () => {
    const out = normalize([[0, 0], [319, 319], [160, 80]], 320, 320);
    expect(out[0]).toEqual([0, 0]);
    expect(out[1]).toEqual([1, 1]);
    expect(out[2][0]).toBeCloseTo(160 / 319, 10);
  });

  it("clamps out-of-canvas samples", () => {
    const out = normalize([[-5, 400]], 320, 320);
    expect(out[0][0]).toBe(0);
    expect(out[0][1]).toBe(1);
  });
});

describe("resample", () => {
  it("passes short strokes through unchanged", () => {
    const pts: Point[] = [[0, 0], [0.5, 0.5], [1, 1]];
    expect(resample(pts)).toEqual(pts);
  });

  it("caps long strokes at 64 points and keeps endpoints", () => {
    const pts: Point[] = [];
    for (let i = 0; i < 500; i++) pts.push([i / 499, Math.sin(i / 20) * 0.4 + 0.5]);
    const out = resample(pts);
    expect(out.length).toBe(MAX_POINTS);
    expect(out[0]).toEqual(pts[0]);
    expect(out[out.length - 1][0]).toBeCloseTo(1, 10);
  });

  it("spaces resampled points evenly by arc length", () => {
    const pts: Point[] = [];
    for (let i = 0; i < 200; i++) pts.push([i / 199, 0.5]);
    const out = resample(pts, 5);
    expect(out.map((p) => p[0])).toEqual([0, 0.25, 0.5, 0.75, 1].map((v) =>
      expect.closeTo(v, 10) as unknown as number));
  });
});

describe("strokeBand", () => {
  it("splits at probability 0.5", () => {
    expect(strokeBand(0.9)).toBe("kept");
    expect(strokeBand(0.5)).toBe("kept");
    expect(strokeBand(0.49)).toBe("noise");
    expect(strokeBand(0.1)).toBe("noise");
    expect(strokeBand(undefined)).toBe("kept");
  });
});

import { describe, expect, it } from "vitest";

import type { StrokeResponse } from "../src/api.js";
import { SessionStore } from "../src/store.js";

function fakeResponse(i: number): StrokeResponse {
  return {
    topk: [i, i + 1, i + 2],
    rank: i + 1,
    rank_percentile: 100 - i,
    rank_list: [i, i + 1, i + 2],
    retrievability: null,
    stroke_select_prob: Array(i + 1).fill(0.8),
  };
}

class FakeApi {
  sent: number[][][] = [];
  undone = 0;
  failNext = false;
  private n = 0;

  async createSession() {
    return { session_id: "abc123" };
  }

  async sendStroke(_sid: string, points: number[][]) {
    if (this.failNext) {
      this.failNext = false;
      throw new Error("boom");
    }
    this.sent.push(points);
    return fakeResponse(this.n++);
  }

  async undoStroke() {
    this.undone++;
    this.n--;
    return { strokes: this.n };
  }

  async listGallery() {
    return { instance_ids: [0, 1, 2] };
  }

  async fetchPhoto() {
    return new ArrayBuffer(0);
  }
}

function makeStore() {
  const api = new FakeApi();
  // structurally compatible with ApiClient
  const store = new SessionStore(api as never);
  return { api, store };
}

describe("SessionStore", () => {
  it("records exactly the service responses", async () => {
    const { store } = makeStore();
    await store.start(7);
    await store.submit([[0.1, 0.1], [0.2, 0.2]]);
    await store.submit([[0.3, 0.3], [0.4, 0.4]]);
    expect(store.history.length).toBe(2);
    expect(store.latest()!.topk).toEqual([1, 2, 3]);
    expect(store.percentiles()).toEqual([100, 99]);
  });

  it("resamples pointer strokes to at most 64 points before sending", async () => {
    const { api, store } = makeStore();
    await store.start();
    const samples: [number, number][] = [];
    for (let i = 0; i < 300; i++) samples.push([i, i]);
    await store.submitPointerStroke(samples, 320, 320);
    expect(api.sent[0].length).toBeLessThanOrEqual(64);
  });

  it("ignores degenerate single-point strokes", async () => {
    const { api, store } = makeStore();
    await store.start();
    await store.submit([[0.5, 0.5]]);
    expect(api.sent.length).toBe(0);
    expect(store.history.length).toBe(0);
  });

  it("undo removes exactly one history entry", async () => {
    const { api, store } = makeStore();
    await store.start();
    await store.submit([[0.1, 0.1], [0.2, 0.2]]);
    await store.submit([[0.3, 0.3], [0.4, 0.4]]);
    await store.undo();
    expect(api.undone).toBe(1);
    expect(store.history.length).toBe(1);
    expect(store.strokes.length).toBe(1);
    expect(store.percentiles()).toEqual([100]);
  });

  it("buffers the stroke and flags offline on network failure", async () => {
    const { api, store } = makeStore();
    await store.start();
    api.failNext = true;
    await expect(store.submit([[0.1, 0.1], [0.2, 0.2]])).rejects.toThrow("boom");
    expect(store.offline).toBe(true);
    expect(store.pending).not.toBeNull();
    expect(store.history.length).toBe(0);
    await store.retryPending();
    expect(store.offline).toBe(false);
    expect(store.pending).toBeNull();
    expect(store.history.length).toBe(1);
  });

  it("serialises concurrent submissions in order", async () => {
    const { api, store } = makeStore();
    await store.start();
    const a = store.submit([[0, 0], [0.1, 0.1]]);
    const b = store.submit([[0.2, 0.2], [0.3, 0.3]]);
    await Promise.all([a, b]);
    expect(api.sent[0][1][0]).toBeCloseTo(0.1);
    expect(api.sent[1][0][0]).toBeCloseTo(0.2);
    expect(store.percentiles()).toEqual([100, 99]);
  });
});

/** Thin client over the retrieval service's HTTP API. */

import type { Point } from "./geometry.js";

export interface StrokeResponse {
  topk: number[];
  rank: number | null;
  rank_percentile: number | null;
  rank_list: number[];
  retrievability: number | null;
  stroke_select_prob: number[];
}

export class ApiClient {
  constructor(private base: string = "") {}

  private async json<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await fetch(this.base + path, {
      method,
      headers: { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!resp.ok) {
      throw new Error(`${method} ${path} failed: ${resp.status}`);
    }
    return (await resp.json()) as T;
  }

  listGallery(): Promise<{ instance_ids: number[] }> {
    return this.json("GET", "/gallery");
  }

  createSession(targetId?: number): Promise<{ session_id: string }> {
    return this.json("POST", "/session",
      targetId === undefined ? {} : { target_id: targetId });
  }

  sendStroke(sessionId: string, points: Point[]): Promise<StrokeResponse> {
    return this.json("POST", `/session/${sessionId}/stroke`, { points });
  }

  undoStroke(sessionId: string): Promise<{ strokes: number }> {
    return this.json("DELETE", `/session/${sessionId}/stroke`);
  }

  async fetchPhoto(instanceId: number): Promise<ArrayBuffer> {
    const resp = await fetch(`${this.base}/gallery/${instanceId}.pgm`);
    if (!resp.ok) throw new Error(`photo ${instanceId} unavailable`);
    return await resp.arrayBuffer();
  }
}

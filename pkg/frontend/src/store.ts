/** Session state: drawn strokes and the per-stroke server history.
 *
 * The store never computes ranks or probabilities itself; every entry is a
 * verbatim service response, so replaying the history against the offline
 * engine yields identical numbers.  Requests are serialised per session, and
 * a stroke that fails to send stays buffered for retry.
 */

import { ApiClient, StrokeResponse } from "./api.js";
import { MAX_POINTS, Point, normalize, resample } from "./geometry.js";

export interface HistoryEntry {
  response: StrokeResponse;
}

export class SessionStore {
  sessionId: string | null = null;
  targetId: number | null = null;
  strokes: Point[][] = [];
  history: HistoryEntry[] = [];
  pending: Point[] | null = null;
  offline = false;
  private queue: Promise<unknown> = Promise.resolve();

  constructor(private api: ApiClient, private listeners: (() => void)[] = []) {}

  onChange(fn: () => void): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn();
  }

  async start(targetId?: number): Promise<void> {
    const { session_id } = await this.api.createSession(targetId);
    this.sessionId = session_id;
    this.targetId = targetId ?? null;
    this.strokes = [];
    this.history = [];
    this.pending = null;
    this.offline = false;
    this.emit();
  }

  /** Normalise, resample to at most 64 points, and submit one stroke. */
  submitPointerStroke(samples: Point[], width: number, height: number): Promise<void> {
    const points = resample(normalize(samples, width, height), MAX_POINTS);
    return this.submit(points);
  }

  submit(points: Point[]): Promise<void> {
    if (points.length < 2) return Promise.resolve();
    const task = this.queue.then(() => this.send(points));
    this.queue = task.catch(() => undefined);
    return task;
  }

  private async send(points: Point[]): Promise<void> {
    if (!this.sessionId) throw new Error("no active session");
    try {
      const response = await this.api.sendStroke(this.sessionId, points);
      this.strokes.push(points);
      this.history.push({ response });
      this.pending = null;
      this.offline = false;
    } catch (err) {
      this.pending = points; // buffered locally until retry
      this.offline = true;
      this.emit();
      throw err;
    }
    this.emit();
  }

  /** Re-send the stroke buffered by a failed submission. */
  retryPending(): Promise<void> {
    const points = this.pending;
    if (!points) return Promise.resolve();
    return this.submit(points);
  }

  async undo(): Promise<void> {
    if (!this.sessionId || this.history.length === 0) return;
    await this.api.undoStroke(this.sessionId);
    this.strokes.pop();
    this.history.pop();
    this.emit();
  }

  latest(): StrokeResponse | null {
    return this.history.length
      ? this.history[this.history.length - 1].response
      : null;
  }

  /** Percentile sparkline series: one value per confirmed stroke. */
  percentiles(): number[] {
    return this.history.map((h) => h.response.rank_percentile ?? 0);
  }

  /** Select probability of each drawn stroke, from the latest response. */
  selectProbs(): number[] {
    const latest = this.latest();
    return latest ? latest.stroke_select_prob : [];
  }
}

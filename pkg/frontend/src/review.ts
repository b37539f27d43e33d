/**
 * Review session state: walks the flagged-patch queue, posts verdicts with
 * optimistic local updates (rolled back when the API refuses), and manages
 * the point-editing correction mode. The service stays the source of truth;
 * nothing here persists beyond the session.
 */

import { ApiClient } from './api.js';
import type { DetectionPoint, QueueItem, Summary, Verdict } from './types.js';

export interface CorrectionDraft {
  points: [number, number][];
}

export type SessionListener = () => void;

export class ReviewSession {
  items: QueueItem[] = [];
  index = 0;
  reviewer: string;
  correction: CorrectionDraft | null = null;
  lastError: string | null = null;
  summary: Summary | null = null;
  detections: DetectionPoint[] = [];
  /** decisions POST in flight; UI may disable inputs */
  busy = false;

  private listeners: SessionListener[] = [];

  constructor(private api: ApiClient, reviewer = 'reviewer') {
    this.reviewer = reviewer;
  }

  onChange(listener: SessionListener): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const l of this.listeners) l();
  }

  async load(status: 'pending' | 'all' = 'pending'): Promise<void> {
    const page = await this.api.queue(status);
    this.items = page.items;
    this.index = 0;
    this.correction = null;
    await this.refreshCurrent();
    await this.refreshSummary();
  }

  current(): QueueItem | null {
    return this.items[this.index] ?? null;
  }

  async refreshCurrent(): Promise<void> {
    const item = this.current();
    this.detections = item ? (await this.api.detections(item.patch_id)).points : [];
    this.notify();
  }

  async next(): Promise<void> {
    if (this.index < this.items.length - 1) {
      this.index += 1;
      this.correction = null;
      await this.refreshCurrent();
    }
  }

  async prev(): Promise<void> {
    if (this.index > 0) {
      this.index -= 1;
      this.correction = null;
      await this.refreshCurrent();
    }
  }

  /** Advance to the next patch without a verdict yet. */
  async nextPending(): Promise<void> {
    for (let i = this.index + 1; i < this.items.length; i++) {
      if (this.items[i].verdict === null) {
        this.index = i;
        this.correction = null;
        await this.refreshCurrent();
        return;
      }
    }
    this.notify();
  }

  private async decide(verdict: Verdict, points?: [number, number][]): Promise<boolean> {
    const item = this.current();
    if (!item || this.busy) return false;
    const prior = item.verdict;
    item.verdict = verdict; // optimistic
    this.busy = true;
    this.lastError = null;
    this.notify();
    try {
      await this.api.postDecision(item.patch_id, this.reviewer, verdict, points);
      await this.refreshSummary();
      return true;
    } catch (err) {
      item.verdict = prior; // rollback: decision is not marked saved
      this.lastError = err instanceof Error ? err.message : String(err);
      return false;
    } finally {
      this.busy = false;
      this.notify();
    }
  }

  async accept(): Promise<boolean> {
    this.correction = null;
    const ok = await this.decide('accept');
    if (ok) await this.nextPending();
    return ok;
  }

  async reject(): Promise<boolean> {
    this.correction = null;
    const ok = await this.decide('reject');
    if (ok) await this.nextPending();
    return ok;
  }

  /** Enter correction mode seeded with the model's detections. */
  startCorrection(): void {
    this.correction = {
      points: this.detections.map((d) => [d.x, d.y] as [number, number]),
    };
    this.notify();
  }

  inCorrection(): boolean {
    return this.correction !== null;
  }

  /**
   * Click in correction mode: remove the nearest draft point within the
   * tolerance, otherwise add a new point at the click position.
   */
  toggleCorrectionPoint(x: number, y: number, tolerancePx = 3): void {
    if (!this.correction) return;
    const pts = this.correction.points;
    let best = -1;
    let bestD = tolerancePx * tolerancePx;
    for (let i = 0; i < pts.length; i++) {
      const d = (pts[i][0] - x) ** 2 + (pts[i][1] - y) ** 2;
      if (d <= bestD) {
        best = i;
        bestD = d;
      }
    }
    if (best >= 0) pts.splice(best, 1);
    else pts.push([x, y]);
    this.notify();
  }

  async confirmCorrection(): Promise<boolean> {
    if (!this.correction) return false;
    const points = this.correction.points;
    const ok = await this.decide('corrected', points);
    if (ok) {
      this.correction = null;
      await this.nextPending();
    }
    return ok;
  }

  cancelCorrection(): void {
    this.correction = null;
    this.notify();
  }

  /** Undo the active decision; the prior decision (or pending) returns. */
  async undo(): Promise<boolean> {
    const item = this.current();
    if (!item || this.busy) return false;
    this.busy = true;
    this.lastError = null;
    try {
      const res = await this.api.undoDecision(item.patch_id);
      item.verdict = res.active_verdict;
      await this.refreshSummary();
      return true;
    } catch (err) {
      this.lastError = err instanceof Error ? err.message : String(err);
      return false;
    } finally {
      this.busy = false;
      this.notify();
    }
  }

  async refreshSummary(): Promise<void> {
    this.summary = await this.api.summary();
    this.notify();
  }

  /** Queue progress: decided / flagged, straight from the service. */
  progress(): number {
    return this.summary ? this.summary.progress : 0;
  }
}

/** Typed client for the review service; one base URL plus optional token. */

import type {
  DecisionBody,
  DecisionRecord,
  PatchDetections,
  QueuePage,
  Summary,
  Verdict,
} from './types.js';

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

export class ApiClient {
  constructor(private baseUrl: string = '', private token: string | null = null) {}

  private headers(json = false): Record<string, string> {
    const h: Record<string, string> = {};
    if (json) h['Content-Type'] = 'application/json';
    if (this.token) h['Authorization'] = `Bearer ${this.token}`;
    return h;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await fetch(`${this.baseUrl}${path}`, init);
    if (!res.ok) {
      let detail = res.statusText;
      try {
        const body = await res.json();
        if (body && body.detail) detail = JSON.stringify(body.detail);
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(res.status, detail);
    }
    return res.json() as Promise<T>;
  }

  queue(status = 'pending', page = 1, pageSize = 200): Promise<QueuePage> {
    const q = new URLSearchParams({
      status, sort: 'probability', page: String(page), page_size: String(pageSize),
    });
    return this.request<QueuePage>(`/api/patches?${q}`, { headers: this.headers() });
  }

  detections(patchId: string): Promise<PatchDetections> {
    return this.request<PatchDetections>(
      `/api/patches/${encodeURIComponent(patchId)}/detections`,
      { headers: this.headers() });
  }

  imageUrl(patchId: string): string {
    return `${this.baseUrl}/api/patches/${encodeURIComponent(patchId)}/image`;
  }

  postDecision(patchId: string, reviewer: string, verdict: Verdict,
               correctedPoints?: [number, number][]): Promise<{ decision_id: number }> {
    const body: DecisionBody = { reviewer, verdict };
    if (correctedPoints) body.corrected_points = correctedPoints;
    return this.request(`/api/patches/${encodeURIComponent(patchId)}/review`, {
      method: 'POST',
      headers: this.headers(true),
      body: JSON.stringify(body),
    });
  }

  undoDecision(patchId: string): Promise<{ active_verdict: Verdict | null }> {
    return this.request(`/api/patches/${encodeURIComponent(patchId)}/review`, {
      method: 'DELETE',
      headers: this.headers(),
    });
  }

  decisionHistory(patchId: string): Promise<{ history: DecisionRecord[] }> {
    return this.request(`/api/patches/${encodeURIComponent(patchId)}/decisions`,
                        { headers: this.headers() });
  }

  summary(): Promise<Summary> {
    return this.request<Summary>('/api/summary', { headers: this.headers() });
  }
}

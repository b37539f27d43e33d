import { beforeEach, describe, expect, it, vi } from 'vitest';

import { ApiClient } from '../src/api.js';
import { ReviewSession } from '../src/review.js';
import type { QueueItem, Summary } from '../src/types.js';

function queueItem(id: string, n = 1): QueueItem {
  return {
    patch_id: id, image_id: 'img', origin: [0, 0], size: 64,
    probability: 0.9, flagged: true, n_detections: n, verdict: null,
  };
}

const emptySummary: Summary = {
  images: {}, total_raw: 0, total_reviewed: 0, flagged: 0, decided: 0, progress: 0,
};

function mockApi(overrides: Partial<Record<keyof ApiClient, unknown>> = {}): ApiClient {
  const api = {
    queue: vi.fn(async () => ({
      items: [queueItem('p1'), queueItem('p2'), queueItem('p3')],
      total: 3, page: 1, page_size: 200,
    })),
    detections: vi.fn(async (id: string) => ({
      patch_id: id, points: [{ x: 10, y: 12, confidence: 0.8 }],
    })),
    postDecision: vi.fn(async () => ({ decision_id: 1 })),
    undoDecision: vi.fn(async () => ({ active_verdict: null })),
    summary: vi.fn(async () => emptySummary),
    imageUrl: (id: string) => `/api/patches/${id}/image`,
    ...overrides,
  };
  return api as unknown as ApiClient;
}

describe('review loop', () => {
  let api: ApiClient;
  let session: ReviewSession;

  beforeEach(async () => {
    api = mockApi();
    session = new ReviewSession(api, 'tess');
    await session.load();
  });

  it('walks the queue in order', async () => {
    expect(session.current()!.patch_id).toBe('p1');
    await session.next();
    expect(session.current()!.patch_id).toBe('p2');
    await session.prev();
    expect(session.current()!.patch_id).toBe('p1');
  });

  it('accept posts the decision without points and advances', async () => {
    const ok = await session.accept();
    expect(ok).toBe(true);
    expect(api.postDecision).toHaveBeenCalledWith('p1', 'tess', 'accept', undefined);
    expect(session.items[0].verdict).toBe('accept');
    expect(session.current()!.patch_id).toBe('p2');
  });

  it('correction posts patch-local points', async () => {
    session.startCorrection();
    expect(session.correction!.points).toEqual([[10, 12]]);
    session.toggleCorrectionPoint(30, 31);
    await session.confirmCorrection();
    expect(api.postDecision).toHaveBeenCalledWith(
      'p1', 'tess', 'corrected', [[10, 12], [30, 31]]);
  });

  it('clicking an existing draft point removes it', () => {
    session.startCorrection();
    session.toggleCorrectionPoint(11, 12, 3); // within tolerance of (10, 12)
    expect(session.correction!.points).toEqual([]);
    session.toggleCorrectionPoint(5, 5);
    session.toggleCorrectionPoint(20, 20);
    expect(session.correction!.points.length).toBe(2);
  });

  it('rolls back the optimistic verdict on API failure', async () => {
    api = mockApi({
      postDecision: vi.fn(async () => {
        throw new Error('boom');
      }),
    });
    session = new ReviewSession(api, 'tess');
    await session.load();
    const ok = await session.reject();
    expect(ok).toBe(false);
    expect(session.items[0].verdict).toBeNull(); // not marked saved
    expect(session.lastError).toContain('boom');
    expect(session.current()!.patch_id).toBe('p1'); // no advance
  });

  it('undo restores the verdict reported by the API', async () => {
    api = mockApi({
      undoDecision: vi.fn(async () => ({ active_verdict: 'accept' as const })),
    });
    session = new ReviewSession(api, 'tess');
    await session.load();
    await session.reject();
    await session.prev();
    const ok = await session.undo();
    expect(ok).toBe(true);
    expect(session.items[0].verdict).toBe('accept');
  });

  it('nextPending skips decided patches', async () => {
    await session.accept(); // p1 decided, now at p2
    await session.prev(); // back to p1
    await session.nextPending();
    expect(session.current()!.patch_id).toBe('p2');
  });

  it('summary is refreshed after every decision', async () => {
    await session.accept();
    // one refresh at load, one after the decision
    expect((api.summary as ReturnType<typeof vi.fn>).mock.calls.length)
      .toBeGreaterThanOrEqual(2);
  });

  it('progress comes straight from the service', async () => {
    api = mockApi({
      summary: vi.fn(async () => ({ ...emptySummary, flagged: 4, decided: 1,
                                    progress: 0.25 })),
    });
    session = new ReviewSession(api, 'tess');
    await session.load();
    expect(session.progress()).toBe(0.25);
  });
});

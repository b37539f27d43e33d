import { afterEach, describe, expect, it, vi } from 'vitest';

import { ApiClient, ApiError } from '../src/api.js';

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { 'Content-Type': 'application/json' },
  });
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe('ApiClient', () => {
  it('builds queue URLs with paging and sends the token', async () => {
    const fetchMock = vi.fn(async () => jsonResponse({ items: [], total: 0,
                                                       page: 2, page_size: 10 }));
    vi.stubGlobal('fetch', fetchMock);
    const api = new ApiClient('http://svc:8787', 'tok');
    await api.queue('pending', 2, 10);
    const [url, init] = fetchMock.mock.calls[0] as unknown as [string, RequestInit];
    expect(url).toBe(
      'http://svc:8787/api/patches?status=pending&sort=probability&page=2&page_size=10');
    expect((init.headers as Record<string, string>).Authorization).toBe('Bearer tok');
  });

  it('posts decisions as JSON', async () => {
    const fetchMock = vi.fn(async () => jsonResponse({ decision_id: 5 }, 201));
    vi.stubGlobal('fetch', fetchMock);
    const api = new ApiClient('');
    await api.postDecision('img:000000_000064', 'rev', 'corrected', [[1, 2]]);
    const [url, init] = fetchMock.mock.calls[0] as unknown as [string, RequestInit];
    expect(url).toBe('/api/patches/img%3A000000_000064/review');
    expect(init.method).toBe('POST');
    expect(JSON.parse(init.body as string)).toEqual({
      reviewer: 'rev', verdict: 'corrected', corrected_points: [[1, 2]],
    });
  });

  it('raises ApiError with status and detail', async () => {
    vi.stubGlobal('fetch', vi.fn(async () =>
      jsonResponse({ detail: 'unknown patch x' }, 404)));
    const api = new ApiClient('');
    await expect(api.detections('x')).rejects.toMatchObject({
      status: 404,
    });
    await expect(api.detections('x')).rejects.toBeInstanceOf(ApiError);
  });

  it('undo sends DELETE', async () => {
    const fetchMock = vi.fn(async () => jsonResponse({ active_verdict: null }));
    vi.stubGlobal('fetch', fetchMock);
    await new ApiClient('').undoDecision('p1');
    const [, init] = fetchMock.mock.calls[0] as unknown as [string, RequestInit];
    expect(init.method).toBe('DELETE');
  });

  it('image URLs are patch-scoped', () => {
    const api = new ApiClient('http://svc');
    expect(api.imageUrl('a:b')).toBe('http://svc/api/patches/a%3Ab/image');
  });
});

/**
 * Browser entry point: canvas viewer with nearest-neighbor zoom, keyboard
 * review loop, correction editing, and the live summary panel.
 *
 * Configuration comes from query parameters: ?api=<base-url>&token=<token>
 * &reviewer=<name>. Same-origin API by default (the service can host this
 * bundle directly).
 */

import { ApiClient } from './api.js';
import { actionForKey } from './keyboard.js';
import { detectionMarkers, draftMarkers, drawMarkers } from './overlay.js';
import { ReviewSession } from './review.js';
import {
  centeredViewport,
  panBy,
  screenToPatch,
  Viewport,
  zoomAt,
} from './transform.js';

const params = new URLSearchParams(window.location.search);
const api = new ApiClient(params.get('api') ?? '', params.get('token'));
const session = new ReviewSession(api, params.get('reviewer') ?? 'reviewer');

const canvas = document.getElementById('view') as HTMLCanvasElement;
const ctx = canvas.getContext('2d')!;
const queueEl = document.getElementById('queue-info')!;
const verdictEl = document.getElementById('verdict')!;
const summaryEl = document.getElementById('summary')!;
const toastEl = document.getElementById('toast')!;
const modeEl = document.getElementById('mode')!;

let viewport: Viewport = { zoom: 4, offsetX: 0, offsetY: 0 };
let patchImage: HTMLImageElement | null = null;
let imageToken = 0;

function resizeCanvas(): void {
  canvas.width = canvas.clientWidth;
  canvas.height = canvas.clientHeight;
  render();
}

async function loadPatchImage(): Promise<void> {
  const item = session.current();
  patchImage = null;
  if (!item) {
    render();
    return;
  }
  const token = ++imageToken;
  const img = new Image();
  img.src = api.imageUrl(item.patch_id);
  await img.decode().catch(() => undefined);
  if (token !== imageToken) return; // superseded by a newer patch
  patchImage = img;
  viewport = centeredViewport(item.size, canvas.width, canvas.height, viewport.zoom);
  render();
}

function render(): void {
  ctx.fillStyle = '#101418';
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  const item = session.current();
  if (!item || !patchImage) {
    queueEl.textContent = session.items.length
      ? `patch ${session.index + 1}/${session.items.length}`
      : 'queue empty';
    return;
  }
  // animals are a handful of pixels: interpolation would smear them
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(patchImage,
                viewport.offsetX, viewport.offsetY,
                patchImage.width * viewport.zoom, patchImage.height * viewport.zoom);

  if (session.inCorrection()) {
    drawMarkers(ctx, draftMarkers(session.correction!.points, viewport), false);
  } else {
    drawMarkers(ctx, detectionMarkers(session.detections, viewport), viewport.zoom >= 4);
  }

  const prob = item.probability === null ? 'n/a' : item.probability.toFixed(3);
  queueEl.textContent =
    `patch ${session.index + 1}/${session.items.length} | ${item.patch_id} ` +
    `| p=${prob} | ${session.detections.length} detections | zoom ${viewport.zoom}x`;
  verdictEl.textContent = item.verdict ? `verdict: ${item.verdict}` : 'pending';
  verdictEl.className = item.verdict ?? 'pending';
  modeEl.textContent = session.inCorrection()
    ? 'CORRECTION: click to add, click a point to remove, Enter to confirm, Esc to cancel'
    : 'A accept | R reject | C correct | U undo | n/p move | +/- zoom';
  renderSummary();
}

function renderSummary(): void {
  const s = session.summary;
  if (!s) return;
  const rows = Object.entries(s.images)
    .map(([id, t]) => `<tr><td>${id}</td><td>${t.raw}</td><td>${t.reviewed}</td></tr>`)
    .join('');
  summaryEl.innerHTML =
    `<table><tr><th>image</th><th>raw</th><th>reviewed</th></tr>${rows}</table>` +
    `<div class="totals">raw ${s.total_raw} | reviewed ${s.total_reviewed} ` +
    `| progress ${(100 * s.progress).toFixed(1)}%</div>`;
}

function toast(message: string): void {
  toastEl.textContent = message;
  toastEl.classList.add('show');
  setTimeout(() => toastEl.classList.remove('show'), 2600);
}

canvas.addEventListener('click', (ev) => {
  if (!session.inCorrection()) return;
  const rect = canvas.getBoundingClientRect();
  const [x, y] = screenToPatch(ev.clientX - rect.left, ev.clientY - rect.top, viewport);
  const item = session.current();
  if (!item) return;
  if (x < -0.5 || y < -0.5 || x >= item.size - 0.5 || y >= item.size - 0.5) return;
  session.toggleCorrectionPoint(x, y, 6 / viewport.zoom);
});

canvas.addEventListener('wheel', (ev) => {
  ev.preventDefault();
  const rect = canvas.getBoundingClientRect();
  viewport = zoomAt(viewport, ev.deltaY < 0 ? 2 : 0.5,
                    ev.clientX - rect.left, ev.clientY - rect.top);
  render();
}, { passive: false });

window.addEventListener('keydown', async (ev) => {
  const action = actionForKey(ev.key, ev.shiftKey);
  if (!action) return;
  ev.preventDefault();
  switch (action.type) {
    case 'accept':
      if (!(await session.accept())) toast(`save failed: ${session.lastError}`);
      else await loadPatchImage();
      break;
    case 'reject':
      if (!(await session.reject())) toast(`save failed: ${session.lastError}`);
      else await loadPatchImage();
      break;
    case 'correct':
      session.startCorrection();
      break;
    case 'confirm':
      if (session.inCorrection()) {
        if (!(await session.confirmCorrection())) toast(`save failed: ${session.lastError}`);
        else await loadPatchImage();
      }
      break;
    case 'cancel':
      session.cancelCorrection();
      break;
    case 'undo':
      if (!(await session.undo())) toast(`undo failed: ${session.lastError}`);
      break;
    case 'next':
      await session.next();
      await loadPatchImage();
      break;
    case 'prev':
      await session.prev();
      await loadPatchImage();
      break;
    case 'zoom':
      viewport = zoomAt(viewport, action.factor, canvas.width / 2, canvas.height / 2);
      render();
      break;
    case 'pan':
      viewport = panBy(viewport, action.dx, action.dy);
      render();
      break;
  }
});

window.addEventListener('resize', resizeCanvas);
window.addEventListener('focus', () => void session.refreshSummary());

session.onChange(render);

(async () => {
  resizeCanvas();
  try {
    await session.load('pending');
    await loadPatchImage();
  } catch (err) {
    toast(`failed to load queue: ${err instanceof Error ? err.message : err}`);
  }
})();

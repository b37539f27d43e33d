/**
 * Overlay draw plan: detection and correction markers as screen-space
 * commands computed from the shared patch->screen transform. Pure so the
 * marker positions are testable apart from canvas state.
 */

import { patchToScreen, Viewport } from './transform.js';
import type { DetectionPoint } from './types.js';

export interface Marker {
  sx: number;
  sy: number;
  kind: 'detection' | 'draft';
  label?: string;
}

export function detectionMarkers(points: DetectionPoint[], vp: Viewport): Marker[] {
  return points.map((p) => {
    const [sx, sy] = patchToScreen(p.x, p.y, vp);
    return { sx, sy, kind: 'detection' as const, label: p.confidence.toFixed(2) };
  });
}

export function draftMarkers(points: [number, number][], vp: Viewport): Marker[] {
  return points.map(([x, y]) => {
    const [sx, sy] = patchToScreen(x, y, vp);
    return { sx, sy, kind: 'draft' as const };
  });
}

export function drawMarkers(ctx: CanvasRenderingContext2D, markers: Marker[],
                            showLabels: boolean): void {
  for (const m of markers) {
    ctx.beginPath();
    ctx.arc(m.sx, m.sy, m.kind === 'detection' ? 6 : 5, 0, Math.PI * 2);
    ctx.strokeStyle = m.kind === 'detection' ? '#ff3b30' : '#34c759';
    ctx.lineWidth = 2;
    ctx.stroke();
    ctx.beginPath();
    ctx.arc(m.sx, m.sy, 1, 0, Math.PI * 2);
    ctx.fillStyle = ctx.strokeStyle;
    ctx.fill();
    if (showLabels && m.label) {
      ctx.fillStyle = '#ffd60a';
      ctx.font = '11px system-ui';
      ctx.fillText(m.label, m.sx + 8, m.sy - 8);
    }
  }
}

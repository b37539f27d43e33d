/**
 * Patch <-> screen coordinate mapping for the zoomable viewer.
 *
 * Patch coordinates use the pixel-index convention: integer x means the
 * center of pixel column x. At zoom z with pan offset (ox, oy) the pixel
 * (px, py) covers the screen rectangle [ox + px*z, ox + (px+1)*z), so a
 * point at patch (x, y) renders at the center of its pixel cell. Keeping
 * the mapping in one place is what makes overlay positions exact at every
 * zoom level.
 */

export interface Viewport {
  zoom: number; // screen pixels per patch pixel (integer zooms stay crisp)
  offsetX: number;
  offsetY: number;
}

export function patchToScreen(x: number, y: number, vp: Viewport): [number, number] {
  return [vp.offsetX + (x + 0.5) * vp.zoom, vp.offsetY + (y + 0.5) * vp.zoom];
}

export function screenToPatch(sx: number, sy: number, vp: Viewport): [number, number] {
  return [(sx - vp.offsetX) / vp.zoom - 0.5, (sy - vp.offsetY) / vp.zoom - 0.5];
}

/** The integer pixel cell under a screen position, or null when outside. */
export function pixelUnderScreen(
  sx: number, sy: number, vp: Viewport, patchSize: number,
): [number, number] | null {
  const px = Math.floor((sx - vp.offsetX) / vp.zoom);
  const py = Math.floor((sy - vp.offsetY) / vp.zoom);
  if (px < 0 || py < 0 || px >= patchSize || py >= patchSize) return null;
  return [px, py];
}

/** Viewport that centers the patch in a view box at the given zoom. */
export function centeredViewport(
  patchSize: number, viewWidth: number, viewHeight: number, zoom: number,
): Viewport {
  return {
    zoom,
    offsetX: Math.round((viewWidth - patchSize * zoom) / 2),
    offsetY: Math.round((viewHeight - patchSize * zoom) / 2),
  };
}

/** Zoom about a screen anchor so the patch point under it stays put. */
export function zoomAt(vp: Viewport, factor: number, sx: number, sy: number): Viewport {
  const zoom = clampZoom(vp.zoom * factor);
  const [px, py] = screenToPatch(sx, sy, vp);
  return {
    zoom,
    offsetX: sx - (px + 0.5) * zoom,
    offsetY: sy - (py + 0.5) * zoom,
  };
}

export function panBy(vp: Viewport, dx: number, dy: number): Viewport {
  return { ...vp, offsetX: vp.offsetX + dx, offsetY: vp.offsetY + dy };
}

const MIN_ZOOM = 1;
const MAX_ZOOM = 32;

export function clampZoom(zoom: number): number {
  return Math.min(MAX_ZOOM, Math.max(MIN_ZOOM, zoom));
}

/** Pure geometry for the live map: marker sizing from signal strength
 * and a lat/lon to viewport projection. No DOM access here so the
 * functions are trivially unit-testable.
 */

export interface RadiusScale {
  /** signal at or below this draws at minPx */
  minDbm: number;
  /** signal at or above this draws at maxPx */
  maxDbm: number;
  minPx: number;
  maxPx: number;
}

export const DEFAULT_SCALE: RadiusScale = {
  minDbm: -100,
  maxDbm: -10,
  minPx: 4,
  maxPx: 22,
};

/** Marker radius in pixels for a last-heard signal strength.
 *
 * Linear between the scale endpoints, clamped outside them, and
 * monotone nondecreasing in rssiDbm. Unknown strength (null, undefined
 * or NaN) draws at the minimum size so silent devices stay visible but
 * small.
 */
export function markerRadius(
  rssiDbm: number | null | undefined,
  scale: RadiusScale = DEFAULT_SCALE,
): number {
  if (rssiDbm === null || rssiDbm === undefined || Number.isNaN(rssiDbm)) {
    return scale.minPx;
  }
  if (scale.maxDbm <= scale.minDbm) {
    // degenerate scale: nothing to interpolate over
    return scale.minPx;
  }
  const t = (rssiDbm - scale.minDbm) / (scale.maxDbm - scale.minDbm);
  const clamped = Math.min(1, Math.max(0, t));
  return scale.minPx + clamped * (scale.maxPx - scale.minPx);
}

export function markerColor(state: string): string {
  return state === "connected" ? "#4cc38a" : "#8b8d98";
}

export interface ViewBox {
  width: number;
  height: number;
  /** pixels kept clear around the edge */
  pad: number;
}

export interface Point {
  x: number;
  y: number;
}

/** Project lat/lon pairs into viewport pixels.
 *
 * Fits the bounding box of the inputs into the padded viewport with
 * independent linear axes (fine at neighbourhood scale). North is up,
 * so latitude maps to a flipped y. A single point, or points with zero
 * span on an axis, land centred on that axis.
 */
export function fitView(
  coords: ReadonlyArray<readonly [number, number]>,
  view: ViewBox,
): Point[] {
  const usableW = view.width - 2 * view.pad;
  const usableH = view.height - 2 * view.pad;
  if (coords.length === 0) return [];
  let latMin = Infinity;
  let latMax = -Infinity;
  let lonMin = Infinity;
  let lonMax = -Infinity;
  for (const [lat, lon] of coords) {
    latMin = Math.min(latMin, lat);
    latMax = Math.max(latMax, lat);
    lonMin = Math.min(lonMin, lon);
    lonMax = Math.max(lonMax, lon);
  }
  const latSpan = latMax - latMin;
  const lonSpan = lonMax - lonMin;
  return coords.map(([lat, lon]) => {
    const x =
      lonSpan > 0 ? view.pad + ((lon - lonMin) / lonSpan) * usableW : view.width / 2;
    const y =
      latSpan > 0 ? view.pad + ((latMax - lat) / latSpan) * usableH : view.height / 2;
    return { x, y };
  });
}

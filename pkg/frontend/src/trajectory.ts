/** Pure SVG geometry for the 2-D context trajectory chart. */

import { TrajectoryPoint } from "./api.js";

export interface ChartPoint {
  x: number;
  y: number;
  label: string;
  speaker: string;
}

export interface ChartGeometry {
  polyline: string;
  points: ChartPoint[];
}

/** Scale trajectory points into a width×height viewbox with padding.
 * Principal-component axes are unitless, so only relative layout matters;
 * degenerate (single-point or constant) inputs land in the center. */
export function chartGeometry(
  points: readonly TrajectoryPoint[],
  width: number,
  height: number,
  pad = 10,
): ChartGeometry {
  if (points.length === 0) {
    return { polyline: "", points: [] };
  }
  const xs = points.map((p) => p.x);
  const ys = points.map((p) => p.y);
  const spanX = Math.max(...xs) - Math.min(...xs);
  const spanY = Math.max(...ys) - Math.min(...ys);
  const scale = (v: number, min: number, span: number, size: number) =>
    span === 0 ? size / 2 : pad + ((v - min) / span) * (size - 2 * pad);

  const chartPoints = points.map((p) => ({
    x: scale(p.x, Math.min(...xs), spanX, width),
    y: scale(p.y, Math.min(...ys), spanY, height),
    label: p.speaker === "start" ? "start" : `${p.k} (${p.speaker})`,
    speaker: p.speaker,
  }));
  const polyline = chartPoints.map((p) => `${p.x},${p.y}`).join(" ");
  return { polyline, points: chartPoints };
}

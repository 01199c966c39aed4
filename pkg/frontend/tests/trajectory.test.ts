import { describe, expect, it } from "vitest";
import { chartGeometry } from "../src/trajectory.js";
import fixture from "./fixtures/session.json";

describe("chartGeometry", () => {
  const points = fixture.trajectory.points;

  it("fixture trajectory has one point per utterance plus the start", () => {
    // five exchanges = ten utterances
    expect(points.length).toBe(11);
    expect(points[0].speaker).toBe("start");
    expect(points.map((p) => p.k)).toEqual([...points.keys()]);
  });

  it("maps every trajectory point into the padded viewbox", () => {
    const geom = chartGeometry(points, 360, 240, 10);
    expect(geom.points.length).toBe(points.length);
    for (const p of geom.points) {
      expect(p.x).toBeGreaterThanOrEqual(10);
      expect(p.x).toBeLessThanOrEqual(350);
      expect(p.y).toBeGreaterThanOrEqual(10);
      expect(p.y).toBeLessThanOrEqual(230);
    }
  });

  it("spans the full padded range in both axes", () => {
    const geom = chartGeometry(points, 360, 240, 10);
    const xs = geom.points.map((p) => p.x);
    const ys = geom.points.map((p) => p.y);
    expect(Math.min(...xs)).toBeCloseTo(10, 9);
    expect(Math.max(...xs)).toBeCloseTo(350, 9);
    expect(Math.min(...ys)).toBeCloseTo(10, 9);
    expect(Math.max(...ys)).toBeCloseTo(230, 9);
  });

  it("preserves relative ordering along each axis", () => {
    const geom = chartGeometry(points, 360, 240);
    for (let i = 0; i < points.length; i++) {
      for (let j = i + 1; j < points.length; j++) {
        expect(Math.sign(geom.points[j].x - geom.points[i].x)).toBe(
          Math.sign(points[j].x - points[i].x),
        );
      }
    }
  });

  it("polyline string pairs up with the scaled points", () => {
    const geom = chartGeometry(points, 360, 240);
    const pairs = geom.polyline.split(" ");
    expect(pairs.length).toBe(geom.points.length);
    pairs.forEach((pair, i) => {
      const [x, y] = pair.split(",").map(Number);
      expect(x).toBe(geom.points[i].x);
      expect(y).toBe(geom.points[i].y);
    });
  });

  it("labels start and numbered speaker turns", () => {
    const geom = chartGeometry(points, 360, 240);
    expect(geom.points[0].label).toBe("start");
    expect(geom.points[1].label).toBe(`1 (${points[1].speaker})`);
  });

  it("centers a single point", () => {
    const geom = chartGeometry([{ k: 0, x: 3, y: -2, speaker: "start" }], 360, 240);
    expect(geom.points[0]).toMatchObject({ x: 180, y: 120 });
    expect(geom.polyline).toBe("180,120");
  });

  it("centers a constant axis", () => {
    const geom = chartGeometry(
      [
        { k: 0, x: 0, y: 5, speaker: "start" },
        { k: 1, x: 1, y: 5, speaker: "A" },
      ],
      360,
      240,
    );
    expect(geom.points.every((p) => p.y === 120)).toBe(true);
    expect(geom.points[0].x).toBe(10);
    expect(geom.points[1].x).toBe(350);
  });

  it("handles an empty trajectory", () => {
    expect(chartGeometry([], 360, 240)).toEqual({ polyline: "", points: [] });
  });
});

/**
 * The three figure kinds rendered from a metrics CSV.
 *
 * All numbers come straight from the CSV; nothing is recomputed here
 * beyond the KDE smoothing of the distribution plot.  Baseline points sit
 * at 1.0 on normalized plots because the harness normalizes every cell by
 * the baseline's median.
 */

import {
  MetricsRow,
  algorithms,
  levels,
  popBins,
  queries,
} from "./csv.js";
import { kdeCurve } from "./kde.js";
import { circle, closeSvg, fmt, line, openSvg, path, rect, text } from "./svg.js";

export type FigureKind = "normalized_errors" | "error_distribution" | "bias_bins";

export interface FigureSpec {
  kind: FigureKind;
  level: number;
  rows: MetricsRow[];
}

const PALETTE = ["#e63946", "#4361ee", "#2d6a4f", "#f4a261", "#7209b7"];

const WIDTH = 640;
const HEIGHT = 420;
const MARGIN = { top: 44, right: 20, bottom: 70, left: 62 };

function algorithmColors(names: string[]): Map<string, string> {
  return new Map(names.map((name, i) => [name, PALETTE[i % PALETTE.length]]));
}

function checkLevel(spec: FigureSpec): void {
  const available = levels(spec.rows);
  if (!available.includes(spec.level)) {
    throw new Error(
      `level ${spec.level} not present in the CSV (levels: ${available.join(", ")})`
    );
  }
}

function legend(names: string[], colors: Map<string, string>): string {
  let out = "";
  names.forEach((name, i) => {
    const x = MARGIN.left + i * 130;
    out += circle(x, 22, 5, colors.get(name)!, 0.9);
    out += text(x + 10, 26, name, { size: 12 });
  });
  return out;
}

export function renderNormalizedErrors(spec: FigureSpec): string {
  checkLevel(spec);
  const rows = spec.rows.filter(
    (r) => r.level === spec.level && !r.popBin && Number.isFinite(r.normalized)
  );
  if (rows.length === 0) {
    throw new Error(`no finite normalized values at level ${spec.level}`);
  }
  const names = algorithms(rows);
  const cats = queries(rows);
  const colors = algorithmColors(names);
  const innerW = WIDTH - MARGIN.left - MARGIN.right;
  const innerH = HEIGHT - MARGIN.top - MARGIN.bottom;
  const maxVal = Math.max(1.25, ...rows.map((r) => r.normalized)) * 1.05;
  const yOf = (v: number) => MARGIN.top + innerH * (1 - v / maxVal);
  const slot = innerW / cats.length;

  let svg = openSvg(WIDTH, HEIGHT);
  svg += text(WIDTH / 2, 14, `Normalized errors, level ${spec.level}`, {
    size: 14,
    anchor: "middle",
  });
  svg += legend(names, colors);
  for (const tick of yTicks(maxVal)) {
    svg += line(MARGIN.left, yOf(tick), WIDTH - MARGIN.right, yOf(tick), {
      stroke: "#eee",
    });
    svg += text(MARGIN.left - 6, yOf(tick) + 4, fmt(tick), {
      anchor: "end",
      size: 10,
    });
  }
  // the baseline reference: median-normalized points center at 1.0
  svg += line(MARGIN.left, yOf(1), WIDTH - MARGIN.right, yOf(1), {
    stroke: "#888",
    dash: "5,4",
  });
  cats.forEach((cat, ci) => {
    const cx = MARGIN.left + slot * (ci + 0.5);
    svg += text(cx, HEIGHT - MARGIN.bottom + 16, cat, {
      anchor: "end",
      size: 10,
      rotate: -30,
    });
    names.forEach((name, ai) => {
      const cells = rows.filter((r) => r.query === cat && r.algorithm === name);
      cells.forEach((r) => {
        // deterministic horizontal offsets by replicate and algorithm
        const dx = (ai - (names.length - 1) / 2) * 14 + (r.replicate % 5) * 2 - 4;
        svg += circle(cx + dx, yOf(r.normalized), 3.2, colors.get(name)!);
      });
    });
  });
  svg += axes();
  svg += text(16, MARGIN.top + innerH / 2, "error / baseline median", {
    anchor: "middle",
    size: 11,
    rotate: -90,
  });
  return svg + closeSvg();
}

export function renderErrorDistribution(spec: FigureSpec): string {
  checkLevel(spec);
  const rows = spec.rows.filter(
    (r) => r.level === spec.level && !r.popBin && Number.isFinite(r.normalized)
  );
  if (rows.length === 0) {
    throw new Error(`no finite normalized values at level ${spec.level}`);
  }
  const names = algorithms(rows);
  const cats = queries(rows);
  const colors = algorithmColors(names);
  const innerW = WIDTH - MARGIN.left - MARGIN.right;
  const ridgeGap = (HEIGHT - MARGIN.top - MARGIN.bottom) / cats.length;
  const values = rows.map((r) => r.normalized);
  const lo = Math.min(0, ...values);
  const hi = Math.max(1.5, ...values) * 1.1;
  const xOf = (v: number) => MARGIN.left + ((v - lo) / (hi - lo)) * innerW;

  let svg = openSvg(WIDTH, HEIGHT);
  svg += text(WIDTH / 2, 14, `Error distributions, level ${spec.level}`, {
    size: 14,
    anchor: "middle",
  });
  svg += legend(names, colors);
  cats.forEach((cat, ci) => {
    const baseY = MARGIN.top + ridgeGap * (ci + 1);
    svg += line(MARGIN.left, baseY, WIDTH - MARGIN.right, baseY, { stroke: "#ddd" });
    svg += text(MARGIN.left - 6, baseY - 2, cat, { anchor: "end", size: 10 });
    names.forEach((name) => {
      const sample = rows
        .filter((r) => r.query === cat && r.algorithm === name)
        .map((r) => r.normalized);
      if (sample.length === 0) return;
      const curve = kdeCurve(sample);
      const peak = Math.max(...curve.map(([, d]) => d), 1e-12);
      const scaled: Array<[number, number]> = curve.map(([x, d]) => [
        xOf(x),
        baseY - (d / peak) * ridgeGap * 0.85,
      ]);
      const area: Array<[number, number]> = [
        [scaled[0][0], baseY],
        ...scaled,
        [scaled[scaled.length - 1][0], baseY],
      ];
      svg += path(area, { fill: colors.get(name)!, opacity: 0.3 });
      svg += path(scaled, { stroke: colors.get(name)!, width: 1.2 });
    });
  });
  const unit = xOf(1);
  svg += line(unit, MARGIN.top, unit, HEIGHT - MARGIN.bottom, {
    stroke: "#888",
    dash: "5,4",
  });
  svg += text(unit, HEIGHT - MARGIN.bottom + 16, "1.0", { anchor: "middle", size: 10 });
  svg += text(WIDTH / 2, HEIGHT - 12, "normalized error (KDE, Scott's rule)", {
    anchor: "middle",
    size: 11,
  });
  return svg + closeSvg();
}

export function renderBiasBins(spec: FigureSpec): string {
  checkLevel(spec);
  const rows = spec.rows.filter((r) => r.level === spec.level && r.popBin);
  if (rows.length === 0) {
    throw new Error(`no population-bin rows at level ${spec.level}`);
  }
  const names = algorithms(rows);
  const bins = popBins(rows);
  const colors = algorithmColors(names);
  const innerW = WIDTH - MARGIN.left - MARGIN.right;
  const innerH = HEIGHT - MARGIN.top - MARGIN.bottom;

  const means = new Map<string, number>();
  for (const name of names) {
    for (const bin of bins) {
      const cell = rows.filter((r) => r.algorithm === name && r.popBin === bin);
      const mean = cell.reduce((a, r) => a + r.bias, 0) / Math.max(cell.length, 1);
      means.set(`${name}|${bin}`, mean);
    }
  }
  const amplitude = Math.max(0.1, ...[...means.values()].map((v) => Math.abs(v))) * 1.15;
  const yOf = (v: number) => MARGIN.top + innerH * (0.5 - v / (2 * amplitude));
  const slot = innerW / bins.length;
  const barW = Math.min(28, (slot * 0.7) / names.length);

  let svg = openSvg(WIDTH, HEIGHT);
  svg += text(WIDTH / 2, 14, `Total-population bias by bin, level ${spec.level}`, {
    size: 14,
    anchor: "middle",
  });
  svg += legend(names, colors);
  for (const tick of [-amplitude, -amplitude / 2, 0, amplitude / 2, amplitude]) {
    svg += line(MARGIN.left, yOf(tick), WIDTH - MARGIN.right, yOf(tick), {
      stroke: tick === 0 ? "#888" : "#eee",
    });
    svg += text(MARGIN.left - 6, yOf(tick) + 4, tick.toFixed(2), {
      anchor: "end",
      size: 10,
    });
  }
  bins.forEach((bin, bi) => {
    const cx = MARGIN.left + slot * (bi + 0.5);
    svg += text(cx, HEIGHT - MARGIN.bottom + 16, bin, {
      anchor: "middle",
      size: 10,
    });
    names.forEach((name, ai) => {
      const mean = means.get(`${name}|${bin}`)!;
      const x = cx + (ai - (names.length - 1) / 2) * (barW + 4) - barW / 2;
      const y0 = yOf(0);
      const y1 = yOf(mean);
      svg += rect(x, Math.min(y0, y1), barW, Math.abs(y1 - y0), colors.get(name)!, 0.8);
    });
  });
  svg += axes();
  svg += text(16, MARGIN.top + innerH / 2, "mean signed total error", {
    anchor: "middle",
    size: 11,
    rotate: -90,
  });
  return svg + closeSvg();
}

export function render(spec: FigureSpec): string {
  switch (spec.kind) {
    case "normalized_errors":
      return renderNormalizedErrors(spec);
    case "error_distribution":
      return renderErrorDistribution(spec);
    case "bias_bins":
      return renderBiasBins(spec);
    default:
      throw new Error(`unknown figure kind ${spec.kind}`);
  }
}

function axes(): string {
  return (
    line(MARGIN.left, MARGIN.top, MARGIN.left, HEIGHT - MARGIN.bottom, {
      stroke: "#444",
    }) +
    line(MARGIN.left, HEIGHT - MARGIN.bottom, WIDTH - MARGIN.right, HEIGHT - MARGIN.bottom, {
      stroke: "#444",
    })
  );
}

function yTicks(maxVal: number): number[] {
  const step = maxVal > 4 ? 1 : maxVal > 2 ? 0.5 : 0.25;
  const ticks: number[] = [];
  for (let v = 0; v <= maxVal; v += step) ticks.push(Number(v.toFixed(4)));
  return ticks;
}

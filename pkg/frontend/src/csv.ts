/**
 * Metrics CSV reader.
 *
 * The upstream harness writes one row per (replicate, algorithm, level,
 * query) cell plus extra rows carrying a population-bin label; values are
 * plain reals with no quoting, so a simple split suffices.
 */

export interface MetricsRow {
  replicate: number;
  algorithm: string;
  level: number;
  query: string;
  rawL1: number;
  normalized: number;
  bias: number;
  popBin: string; // empty for whole-level cells
}

export const EXPECTED_HEADER =
  "replicate,algorithm,level,query,raw_l1,normalized,bias,pop_bin";

export function parseMetricsCsv(text: string): MetricsRow[] {
  const lines = text.split(/\r?\n/).filter((l) => l.length > 0);
  if (lines.length === 0) {
    throw new Error("metrics CSV is empty");
  }
  if (lines[0] !== EXPECTED_HEADER) {
    throw new Error(
      `unexpected metrics header: got "${lines[0]}", expected "${EXPECTED_HEADER}"`
    );
  }
  const rows: MetricsRow[] = [];
  for (const [i, line] of lines.slice(1).entries()) {
    const parts = line.split(",");
    if (parts.length !== 8) {
      throw new Error(`line ${i + 2}: expected 8 columns, got ${parts.length}`);
    }
    const [rep, algo, level, query, raw, norm, bias, popBin] = parts;
    rows.push({
      replicate: Number(rep),
      algorithm: algo,
      level: Number(level),
      query,
      rawL1: Number(raw),
      normalized: Number(norm),
      bias: Number(bias),
      popBin,
    });
  }
  return rows;
}

export function algorithms(rows: MetricsRow[]): string[] {
  return [...new Set(rows.map((r) => r.algorithm))].sort();
}

export function levels(rows: MetricsRow[]): number[] {
  return [...new Set(rows.map((r) => r.level))].sort((a, b) => a - b);
}

export function queries(rows: MetricsRow[]): string[] {
  return [...new Set(rows.filter((r) => !r.popBin).map((r) => r.query))].sort();
}

export function popBins(rows: MetricsRow[]): string[] {
  return [...new Set(rows.filter((r) => r.popBin).map((r) => r.popBin))].sort(
    (a, b) => binLowerEdge(a) - binLowerEdge(b)
  );
}

function binLowerEdge(label: string): number {
  const match = /^\[(\d+)-/.exec(label);
  return match ? Number(match[1]) : Number.POSITIVE_INFINITY;
}

#!/usr/bin/env npx tsx
/**
 * Render one figure from a metrics CSV.
 *
 * Usage:
 *   npx tsx src/cli.ts --metrics metrics.csv --kind normalized_errors \
 *       --level 2 --out errors.svg
 *
 * Kinds: normalized_errors | error_distribution | bias_bins
 */

import { readFile, writeFile } from "fs/promises";

import { parseMetricsCsv } from "./csv.js";
import { FigureKind, render } from "./figures.js";

interface Args {
  metrics: string;
  kind: FigureKind;
  level: number;
  out: string;
}

const KINDS: FigureKind[] = [
  "normalized_errors",
  "error_distribution",
  "bias_bins",
];

function parseArgs(argv: string[]): Args {
  const values = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const flag = argv[i];
    const value = argv[i + 1];
    if (!flag.startsWith("--") || value === undefined) {
      throw new Error(`malformed arguments near "${flag}"`);
    }
    values.set(flag.slice(2), value);
  }
  for (const required of ["metrics", "kind", "out"]) {
    if (!values.has(required)) {
      throw new Error(`missing --${required}`);
    }
  }
  const kind = values.get("kind")! as FigureKind;
  if (!KINDS.includes(kind)) {
    throw new Error(`--kind must be one of ${KINDS.join(", ")}`);
  }
  return {
    metrics: values.get("metrics")!,
    kind,
    level: Number(values.get("level") ?? "1"),
    out: values.get("out")!,
  };
}

async function main(): Promise<void> {
  const args = parseArgs(process.argv.slice(2));
  const rows = parseMetricsCsv(await readFile(args.metrics, "utf-8"));
  const svg = render({ kind: args.kind, level: args.level, rows });
  await writeFile(args.out, svg);
  console.log(`SVG -> ${args.out}`);
}

main().catch((err: Error) => {
  console.error(`error: ${err.message}`);
  process.exit(1);
});

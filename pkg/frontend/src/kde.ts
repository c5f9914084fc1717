/** Gaussian kernel density estimation with Scott's-rule bandwidth. */

export function scottBandwidth(values: number[]): number {
  const n = values.length;
  if (n < 2) return 1.0;
  const mean = values.reduce((a, b) => a + b, 0) / n;
  const variance =
    values.reduce((a, b) => a + (b - mean) * (b - mean), 0) / (n - 1);
  const sd = Math.sqrt(variance);
  const bw = sd * Math.pow(n, -1 / 5);
  return bw > 0 ? bw : 1e-3 * (Math.abs(mean) + 1);
}

export function kdeCurve(
  values: number[],
  points = 120,
  padBandwidths = 3
): Array<[number, number]> {
  if (values.length === 0) return [];
  const bw = scottBandwidth(values);
  const lo = Math.min(...values) - padBandwidths * bw;
  const hi = Math.max(...values) + padBandwidths * bw;
  const span = hi - lo || 1.0;
  const norm = 1 / (values.length * bw * Math.sqrt(2 * Math.PI));
  const curve: Array<[number, number]> = [];
  for (let i = 0; i < points; i++) {
    const x = lo + (span * i) / (points - 1);
    let density = 0;
    for (const v of values) {
      const u = (x - v) / bw;
      density += Math.exp(-0.5 * u * u);
    }
    curve.push([x, density * norm]);
  }
  return curve;
}

/** Minimal SVG string assembly; deterministic given the same inputs. */

const XMLNS = "http://www.w3.org/2000/svg";

export function fmt(x: number): string {
  return Number.isInteger(x) ? String(x) : x.toFixed(2);
}

export function openSvg(width: number, height: number): string {
  return (
    `<svg xmlns="${XMLNS}" viewBox="0 0 ${width} ${height}" ` +
    `font-family="Helvetica, Arial, sans-serif">\n` +
    `<rect width="${width}" height="${height}" fill="white"/>\n`
  );
}

export function text(
  x: number,
  y: number,
  content: string,
  opts: { size?: number; anchor?: string; fill?: string; rotate?: number } = {}
): string {
  const size = opts.size ?? 11;
  const anchor = opts.anchor ?? "start";
  const fill = opts.fill ?? "#222";
  const transform =
    opts.rotate !== undefined
      ? ` transform="rotate(${opts.rotate} ${fmt(x)} ${fmt(y)})"`
      : "";
  return (
    `<text x="${fmt(x)}" y="${fmt(y)}" font-size="${size}" ` +
    `text-anchor="${anchor}" fill="${fill}"${transform}>${escapeXml(content)}</text>\n`
  );
}

export function line(
  x1: number,
  y1: number,
  x2: number,
  y2: number,
  opts: { stroke?: string; width?: number; dash?: string } = {}
): string {
  const dash = opts.dash ? ` stroke-dasharray="${opts.dash}"` : "";
  return (
    `<line x1="${fmt(x1)}" y1="${fmt(y1)}" x2="${fmt(x2)}" y2="${fmt(y2)}" ` +
    `stroke="${opts.stroke ?? "#999"}" stroke-width="${opts.width ?? 1}"${dash}/>\n`
  );
}

export function circle(
  cx: number,
  cy: number,
  r: number,
  fill: string,
  opacity = 0.75
): string {
  return `<circle cx="${fmt(cx)}" cy="${fmt(cy)}" r="${fmt(r)}" fill="${fill}" fill-opacity="${opacity}"/>\n`;
}

export function rect(
  x: number,
  y: number,
  width: number,
  height: number,
  fill: string,
  opacity = 0.9
): string {
  return (
    `<rect x="${fmt(x)}" y="${fmt(y)}" width="${fmt(Math.max(width, 0))}" ` +
    `height="${fmt(Math.max(height, 0))}" fill="${fill}" fill-opacity="${opacity}"/>\n`
  );
}

export function path(points: Array<[number, number]>, opts: {
  stroke?: string;
  fill?: string;
  width?: number;
  opacity?: number;
} = {}): string {
  if (points.length === 0) return "";
  const d = points
    .map(([x, y], i) => `${i === 0 ? "M" : "L"}${fmt(x)},${fmt(y)}`)
    .join(" ");
  return (
    `<path d="${d}" stroke="${opts.stroke ?? "none"}" fill="${opts.fill ?? "none"}" ` +
    `stroke-width="${opts.width ?? 1}" opacity="${opts.opacity ?? 1}"/>\n`
  );
}

export function closeSvg(): string {
  return "</svg>\n";
}

function escapeXml(value: string): string {
  return value
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;");
}

// Deterministic SVG line-figure builder.  No timestamps, no randomness,
// no locale-dependent formatting: identical inputs must produce
// byte-identical output so re-rendering a run is reproducible.

export class RenderError extends Error {}

export interface Series {
  label: string;
  x: number[];
  y: number[];
}

export interface FigureOptions {
  title: string;
  xlabel: string;
  ylabel: string;
  logy?: boolean;
  width?: number;
  height?: number;
}

const PALETTE = [
  "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
  "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f",
];

const MARGIN = { top: 44, right: 20, bottom: 52, left: 78 };

function stripExpZeros(s: string): string {
  return s.replace(/\.?0+e/, "e");
}

/** Compact tick label, identical for identical doubles. */
export function fmtTick(v: number): string {
  if (v === 0) return "0";
  const a = Math.abs(v);
  if (a >= 1e4 || a < 1e-3) return stripExpZeros(v.toExponential(2));
  return String(parseFloat(v.toPrecision(10)));
}

/** Round ticks on a 1-2-5 ladder covering [lo, hi]. */
export function linearTicks(lo: number, hi: number, target = 6): number[] {
  if (!(hi > lo)) return [lo];
  const raw = (hi - lo) / Math.max(1, target);
  const mag = Math.pow(10, Math.floor(Math.log10(raw)));
  let step = 10 * mag;
  for (const m of [1, 2, 5]) {
    if (m * mag >= raw) {
      step = m * mag;
      break;
    }
  }
  const ticks: number[] = [];
  const first = Math.ceil(lo / step - 1e-9);
  const last = Math.floor(hi / step + 1e-9);
  for (let k = first; k <= last; k++) {
    const v = k * step;
    ticks.push(v === 0 ? 0 : v);
  }
  return ticks;
}

/** Powers of ten inside [lo, hi]; lo must be positive. */
export function decadeTicks(lo: number, hi: number): number[] {
  const k0 = Math.ceil(Math.log10(lo) - 1e-9);
  const k1 = Math.floor(Math.log10(hi) + 1e-9);
  const out: number[] = [];
  // Math.pow(10, k) is off by an ulp for negative k; the literal parse
  // is the closest double and matches the data's own decade values.
  for (let k = k0; k <= k1; k++) out.push(Number(`1e${k}`));
  return out.length > 0 ? out : [lo];
}

function esc(s: string): string {
  return s.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

// Pixel coordinates rounded to 1/100 px keep the output stable across
// reorderings of the same arithmetic.
function px(v: number): string {
  return String(Math.round(v * 100) / 100);
}

interface Kept {
  label: string;
  pts: Array<[number, number]>;
}

function keepFinite(series: Series[], logy: boolean): Kept[] {
  return series.map((s) => {
    const pts: Array<[number, number]> = [];
    for (let i = 0; i < s.x.length; i++) {
      const xv = s.x[i];
      const yv = s.y[i];
      if (!Number.isFinite(xv) || !Number.isFinite(yv)) continue;
      if (logy && yv <= 0) continue;
      pts.push([xv, yv]);
    }
    return { label: s.label, pts };
  });
}

export function renderFigure(series: Series[], opts: FigureOptions): string {
  const width = opts.width ?? 720;
  const height = opts.height ?? 480;
  const logy = opts.logy ?? false;
  const kept = keepFinite(series, logy);
  const pts = kept.flatMap((s) => s.pts);
  if (pts.length === 0) {
    throw new RenderError(logy
      ? "no drawable points (log scale discards values <= 0)"
      : "no drawable points");
  }

  let xlo = Math.min(...pts.map((p) => p[0]));
  let xhi = Math.max(...pts.map((p) => p[0]));
  let ylo = Math.min(...pts.map((p) => p[1]));
  let yhi = Math.max(...pts.map((p) => p[1]));
  if (xlo === xhi) {
    xlo -= 1;
    xhi += 1;
  }
  if (logy) {
    if (ylo === yhi) {
      ylo /= 10;
      yhi *= 10;
    }
  } else {
    const pad = ylo === yhi ? (ylo === 0 ? 1 : Math.abs(ylo) * 0.1)
      : (yhi - ylo) * 0.05;
    ylo -= pad;
    yhi += pad;
  }

  const x0 = MARGIN.left;
  const x1 = width - MARGIN.right;
  const y0 = height - MARGIN.bottom;
  const y1 = MARGIN.top;
  const sx = (v: number) => x0 + ((v - xlo) / (xhi - xlo)) * (x1 - x0);
  const sy = logy
    ? (v: number) =>
        y0 + ((Math.log10(v) - Math.log10(ylo))
          / (Math.log10(yhi) - Math.log10(ylo))) * (y1 - y0)
    : (v: number) => y0 + ((v - ylo) / (yhi - ylo)) * (y1 - y0);

  const xticks = linearTicks(xlo, xhi);
  const yticks = logy ? decadeTicks(ylo, yhi) : linearTicks(ylo, yhi);

  const out: string[] = [];
  out.push(
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" `
      + `viewBox="0 0 ${width} ${height}" font-family="Helvetica, Arial, sans-serif">`,
  );
  out.push(`<rect width="${width}" height="${height}" fill="#ffffff"/>`);

  for (const t of xticks) {
    const gx = px(sx(t));
    out.push(`<line x1="${gx}" y1="${px(y0)}" x2="${gx}" y2="${px(y1)}" stroke="#e6e6e6"/>`);
    out.push(`<line x1="${gx}" y1="${px(y0)}" x2="${gx}" y2="${px(y0 + 4)}" stroke="#444444"/>`);
    out.push(`<text x="${gx}" y="${px(y0 + 17)}" font-size="12" fill="#222222" `
      + `text-anchor="middle">${fmtTick(t)}</text>`);
  }
  for (const t of yticks) {
    const gy = px(sy(t));
    out.push(`<line x1="${px(x0)}" y1="${gy}" x2="${px(x1)}" y2="${gy}" stroke="#e6e6e6"/>`);
    out.push(`<line x1="${px(x0 - 4)}" y1="${gy}" x2="${px(x0)}" y2="${gy}" stroke="#444444"/>`);
    out.push(`<text x="${px(x0 - 7)}" y="${gy}" font-size="12" fill="#222222" `
      + `text-anchor="end" dominant-baseline="middle">${fmtTick(t)}</text>`);
  }
  out.push(`<rect x="${px(x0)}" y="${px(y1)}" width="${px(x1 - x0)}" `
    + `height="${px(y0 - y1)}" fill="none" stroke="#444444"/>`);

  kept.forEach((s, i) => {
    const color = PALETTE[i % PALETTE.length];
    if (s.pts.length >= 2) {
      const coords = s.pts.map((p) => `${px(sx(p[0]))},${px(sy(p[1]))}`).join(" ");
      out.push(`<polyline points="${coords}" fill="none" stroke="${color}" stroke-width="1.6"/>`);
    } else {
      const p = s.pts[0];
      out.push(`<circle cx="${px(sx(p[0]))}" cy="${px(sy(p[1]))}" r="2.5" fill="${color}"/>`);
    }
  });

  out.push(`<text x="${px((x0 + x1) / 2)}" y="26" font-size="15" font-weight="bold" `
    + `fill="#000000" text-anchor="middle">${esc(opts.title)}</text>`);
  out.push(`<text x="${px((x0 + x1) / 2)}" y="${px(height - 12)}" font-size="13" `
    + `fill="#000000" text-anchor="middle">${esc(opts.xlabel)}</text>`);
  out.push(`<text x="20" y="${px((y0 + y1) / 2)}" font-size="13" fill="#000000" `
    + `text-anchor="middle" transform="rotate(-90 20 ${px((y0 + y1) / 2)})">`
    + `${esc(opts.ylabel)}</text>`);

  // Legend box sized from label lengths; no font metrics available, so
  // a fixed per-character estimate keeps the layout deterministic.
  const lw = Math.max(...kept.map((s) => s.label.length)) * 6.6 + 34;
  const lx = x1 - lw - 8;
  const ly = y1 + 8;
  out.push(`<rect x="${px(lx)}" y="${px(ly)}" width="${px(lw)}" `
    + `height="${px(kept.length * 17 + 8)}" fill="#ffffff" fill-opacity="0.85" `
    + `stroke="#bbbbbb"/>`);
  kept.forEach((s, i) => {
    const cy = ly + 13 + i * 17;
    const color = PALETTE[i % PALETTE.length];
    out.push(`<line x1="${px(lx + 6)}" y1="${px(cy - 4)}" x2="${px(lx + 24)}" `
      + `y2="${px(cy - 4)}" stroke="${color}" stroke-width="2"/>`);
    out.push(`<text x="${px(lx + 29)}" y="${px(cy)}" font-size="12" `
      + `fill="#222222">${esc(s.label)}</text>`);
  });

  out.push("</svg>");
  return out.join("\n") + "\n";
}

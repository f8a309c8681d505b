// Figure builders over the simulator's documented CSV schemas:
// outlet histories (t + one column per quantity), stacked spatial
// profiles (time, x, quantities) and per-iteration solver stats.

import {
  CsvError,
  Table,
  columnIndex,
  numberAt,
  numericColumn,
} from "./csv";
import { FigureOptions, Series, fmtTick, renderFigure } from "./svg";

export class DataError extends Error {}

export interface FigureRequest {
  columns?: string[];
  value?: string;
  logy?: boolean;
  title?: string;
  xlabel?: string;
  ylabel?: string;
}

function requireRows(table: Table, source: string): void {
  if (table.rows.length === 0) {
    throw new DataError(`${source}: no data rows`);
  }
}

function valueColumns(
  table: Table,
  reserved: string[],
  req: FigureRequest,
  source: string,
): string[] {
  if (req.columns !== undefined && req.columns.length > 0) {
    req.columns.forEach((c) => columnIndex(table, c, source));
    return req.columns;
  }
  const cols = table.header.filter((h) => !reserved.includes(h));
  if (cols.length === 0) {
    throw new DataError(`${source}: no value columns besides ${reserved.join(", ")}`);
  }
  return cols;
}

function figureOptions(
  req: FigureRequest,
  defaults: FigureOptions,
): FigureOptions {
  return {
    title: req.title ?? defaults.title,
    xlabel: req.xlabel ?? defaults.xlabel,
    ylabel: req.ylabel ?? defaults.ylabel,
    logy: req.logy ?? defaults.logy,
  };
}

/** Outlet concentration history, one line per quantity column. */
export function elutionFigure(
  table: Table,
  source: string,
  req: FigureRequest = {},
): string {
  requireRows(table, source);
  const hours = numericColumn(table, "t", source).map((t) => t / 3600);
  const series: Series[] = valueColumns(table, ["t"], req, source).map((c) => ({
    label: c,
    x: hours,
    y: numericColumn(table, c, source),
  }));
  return renderFigure(series, figureOptions(req, {
    title: "Elution curves at the column outlet",
    xlabel: "time (h)",
    ylabel: "concentration (mol/L)",
  }));
}

interface Block {
  t: number;
  rows: string[][];
  first: number;
}

/** Rows grouped by the time cell, in file order. */
function timeBlocks(table: Table, source: string): Block[] {
  const ti = columnIndex(table, "time", source);
  const blocks: Block[] = [];
  let prev: string | null = null;
  table.rows.forEach((row, k) => {
    if (row[ti] !== prev) {
      prev = row[ti];
      blocks.push({ t: numberAt(row, ti, source, k + 2), rows: [], first: k });
    }
    blocks[blocks.length - 1].rows.push(row);
  });
  return blocks;
}

/** Spatial concentration profiles, one line per quantity and snapshot. */
export function profileFigure(
  table: Table,
  source: string,
  req: FigureRequest = {},
): string {
  requireRows(table, source);
  const xi = columnIndex(table, "x", source);
  const blocks = timeBlocks(table, source);
  const cols = valueColumns(table, ["time", "x"], req, source);
  const series: Series[] = [];
  for (const c of cols) {
    const ci = columnIndex(table, c, source);
    for (const b of blocks) {
      series.push({
        label: `${c} t=${fmtTick(b.t / 3600)} h`,
        x: b.rows.map((r, k) => numberAt(r, xi, source, b.first + k + 2)),
        y: b.rows.map((r, k) => numberAt(r, ci, source, b.first + k + 2)),
      });
    }
  }
  return renderFigure(series, figureOptions(req, {
    title: "Concentration profiles",
    xlabel: "distance (m)",
    ylabel: "concentration (mol/L)",
  }));
}

/**
 * Cumulative linear-solver work against the running outer-iteration
 * count.  Stats rows appear once per outer iteration; the trailing row
 * of a converged step reports the final residual and leaves the
 * iteration counters empty, so empty cells are skipped, not errors.
 */
export function cumulativeGmres(
  table: Table,
  source: string,
): { x: number[]; y: number[] } {
  const gi = columnIndex(table, "gmres", source);
  const x: number[] = [];
  const y: number[] = [];
  let total = 0;
  table.rows.forEach((row, k) => {
    const cell = row[gi];
    if (cell === "" || cell === undefined) return;
    total += numberAt(row, gi, source, k + 2);
    x.push(x.length + 1);
    y.push(total);
  });
  return { x, y };
}

/** Linear-solver effort curve from the per-iteration stats file. */
export function iterationsFigure(
  table: Table,
  source: string,
  req: FigureRequest = {},
): string {
  requireRows(table, source);
  const cum = cumulativeGmres(table, source);
  if (cum.x.length === 0) {
    throw new DataError(
      `${source}: no linear-iteration counts (method without an inner solver?)`,
    );
  }
  const series: Series[] = [
    { label: "cumulative GMRES", x: cum.x, y: cum.y },
  ];
  return renderFigure(series, figureOptions(req, {
    title: "Linear solver effort",
    xlabel: "Newton iteration",
    ylabel: "cumulative GMRES iterations",
  }));
}

/** Mesh-refinement comparison table, one line per method. */
export function comparisonFigure(
  table: Table,
  source: string,
  req: FigureRequest = {},
): string {
  requireRows(table, source);
  const value = req.value ?? "outer_total";
  const ci = columnIndex(table, "cells", source);
  const mi = columnIndex(table, "method", source);
  const vi = columnIndex(table, value, source);
  const si = table.header.indexOf("status");
  const groups = new Map<string, Array<[number, number]>>();
  table.rows.forEach((row, k) => {
    if (si >= 0 && row[si] !== "ok") return;
    const pt: [number, number] = [
      numberAt(row, ci, source, k + 2),
      numberAt(row, vi, source, k + 2),
    ];
    const g = groups.get(row[mi]);
    if (g) {
      g.push(pt);
    } else {
      groups.set(row[mi], [pt]);
    }
  });
  if (groups.size === 0) {
    throw new DataError(`${source}: no successful runs to compare`);
  }
  const series: Series[] = [...groups.entries()].map(([method, pts]) => {
    const sorted = [...pts].sort((a, b) => a[0] - b[0]);
    return {
      label: method,
      x: sorted.map((p) => p[0]),
      y: sorted.map((p) => p[1]),
    };
  });
  return renderFigure(series, figureOptions(req, {
    title: `Method comparison: ${value}`,
    xlabel: "cells",
    ylabel: value,
  }));
}

export type FigureKind = "elution" | "profile" | "iterations" | "comparison";

export const FIGURES: Record<
  FigureKind,
  (table: Table, source: string, req?: FigureRequest) => string
> = {
  elution: elutionFigure,
  profile: profileFigure,
  iterations: iterationsFigure,
  comparison: comparisonFigure,
};

export { CsvError };

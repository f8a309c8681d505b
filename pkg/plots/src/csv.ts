// Strict reader for the simulator's CSV outputs.  The writers emit
// plain comma-joined cells with a single header line and never quote
// or escape, so field splitting parses this dialect exactly; cells may
// be empty where a solver counter does not apply to a row.

import { readFileSync } from "fs";

export class CsvError extends Error {}

export interface Table {
  header: string[];
  rows: string[][];
}

export function parseCsvText(text: string, source: string): Table {
  const lines = text.split(/\r?\n/).filter((ln) => ln.length > 0);
  if (lines.length === 0) {
    throw new CsvError(`${source}: no header line`);
  }
  const header = lines[0].split(",");
  const rows = lines.slice(1).map((ln) => ln.split(","));
  rows.forEach((r, i) => {
    if (r.length !== header.length) {
      throw new CsvError(
        `${source}: row ${i + 2} has ${r.length} cells, header has ${header.length}`,
      );
    }
  });
  return { header, rows };
}

export function readTable(path: string): Table {
  let text: string;
  try {
    text = readFileSync(path, "utf8");
  } catch (err) {
    throw new CsvError(`cannot read ${path}: ${(err as Error).message}`);
  }
  return parseCsvText(text, path);
}

export function columnIndex(table: Table, name: string, source: string): number {
  const i = table.header.indexOf(name);
  if (i < 0) {
    throw new CsvError(
      `${source}: missing column '${name}' (have: ${table.header.join(", ")})`,
    );
  }
  return i;
}

/** Numeric cell; empty or non-numeric cells are schema violations here. */
export function numberAt(
  row: string[],
  col: number,
  source: string,
  line: number,
): number {
  const cell = row[col];
  const v = Number(cell);
  if (cell === "" || cell === undefined || !Number.isFinite(v)) {
    throw new CsvError(`${source}: row ${line} has non-numeric cell '${cell}'`);
  }
  return v;
}

export function numericColumn(
  table: Table,
  name: string,
  source: string,
): number[] {
  const i = columnIndex(table, name, source);
  return table.rows.map((r, k) => numberAt(r, i, source, k + 2));
}

// Batch renderer: one figure per invocation, read CSV, write SVG.
// Exit codes: 0 ok, 1 bad or unusable data, 2 usage error.

import { writeFileSync } from "fs";
import { parseArgs } from "util";
import { CsvError, readTable } from "./csv";
import { DataError, FIGURES, FigureKind, FigureRequest } from "./figures";
import { RenderError } from "./svg";

export const USAGE = `usage: plots --kind <figure> --in <csv> --out <svg>

  --kind      elution | profile | iterations | comparison
  --in        input CSV written by a simulation run
  --out       output SVG path
  --columns   comma-separated quantity columns (elution, profile)
  --value     value column to plot (comparison; default outer_total)
  --logy      logarithmic concentration axis
  --title, --xlabel, --ylabel   override figure text
`;

const OPTIONS = {
  kind: { type: "string" },
  in: { type: "string" },
  out: { type: "string" },
  columns: { type: "string" },
  value: { type: "string" },
  logy: { type: "boolean", default: false },
  title: { type: "string" },
  xlabel: { type: "string" },
  ylabel: { type: "string" },
  help: { type: "boolean", short: "h", default: false },
} as const;

function usageError(msg: string): number {
  console.error(`plots: ${msg}`);
  console.error(USAGE);
  return 2;
}

export function main(argv: string[]): number {
  let values;
  try {
    values = parseArgs({ args: argv, options: OPTIONS }).values;
  } catch (err) {
    return usageError((err as Error).message);
  }
  if (values.help) {
    console.log(USAGE);
    return 0;
  }
  const kind = values.kind as FigureKind | undefined;
  if (kind === undefined || !(kind in FIGURES)) {
    return usageError(`--kind must be one of ${Object.keys(FIGURES).join(", ")}`);
  }
  if (values.in === undefined || values.out === undefined) {
    return usageError("--in and --out are required");
  }

  const req: FigureRequest = {
    columns: values.columns?.split(",").map((c) => c.trim()),
    value: values.value,
    logy: values.logy,
    title: values.title,
    xlabel: values.xlabel,
    ylabel: values.ylabel,
  };
  try {
    const table = readTable(values.in);
    const svg = FIGURES[kind](table, values.in, req);
    // Render fully before touching the output path: a bad input never
    // leaves a truncated or empty figure behind.
    writeFileSync(values.out, svg, "utf8");
  } catch (err) {
    if (err instanceof CsvError || err instanceof DataError
      || err instanceof RenderError) {
      console.error(`plots: ${err.message}`);
      return 1;
    }
    console.error(`plots: cannot write ${values.out}: ${(err as Error).message}`);
    return 1;
  }
  return 0;
}

if (require.main === module) {
  process.exitCode = main(process.argv.slice(2));
}

/**
 * The export job: read one or more tensor dumps, validate, optionally
 * unit-normalize, and emit a single EMB1 file plus manifest.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { parseDelimited } from "./csv";
import { writeEmb1 } from "./emb1";
import { Matrix, assertFinite, concatRows, normalizeRows } from "./matrix";
import { parseNpy } from "./npy";

export type InputFormat = "npy" | "csv";

export interface ExportJob {
  inputs: string[];
  format?: InputFormat; // inferred from the extension when omitted
  spaceId: string;
  modality: string;
  normalize: boolean;
  output: string;
}

function inferFormat(file: string): InputFormat {
  const ext = path.extname(file).toLowerCase();
  if (ext === ".npy") return "npy";
  if (ext === ".csv" || ext === ".tsv" || ext === ".txt") return "csv";
  throw new Error(`cannot infer format from '${file}'; pass --format npy|csv`);
}

function readOne(file: string, format?: InputFormat): Matrix {
  const chosen = format ?? inferFormat(file);
  if (!fs.existsSync(file)) {
    throw new Error(`input file not found: ${file}`);
  }
  if (chosen === "npy") {
    return parseNpy(fs.readFileSync(file));
  }
  if (chosen === "csv") {
    return parseDelimited(fs.readFileSync(file, "utf-8"));
  }
  throw new Error(`unknown format '${chosen}'`);
}

export function runExportJob(job: ExportJob): { rows: number; dim: number } {
  if (job.inputs.length === 0) {
    throw new Error("at least one --input is required");
  }
  let matrix = concatRows(job.inputs.map((f) => readOne(f, job.format)));
  assertFinite(matrix);
  if (job.normalize) {
    matrix = normalizeRows(matrix);
  }
  const note =
    `exported from ${job.inputs.map((f) => path.basename(f)).join(", ")}` +
    (matrix.sourceIsFloat32 ? "" : " (values downcast to float32)");
  writeEmb1(matrix, {
    spaceId: job.spaceId,
    modality: job.modality,
    normalized: job.normalize,
    sourceNote: note,
  }, job.output);
  return { rows: matrix.rows, dim: matrix.cols };
}

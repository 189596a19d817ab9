/**
 * Reader for delimited text matrices: one row per line, numeric cells
 * separated by comma, semicolon, tab, or runs of spaces. The delimiter is
 * sniffed from the first data line; all rows must agree on width.
 */

import { Matrix } from "./matrix";

function splitLine(line: string, delimiter: string): string[] {
  if (delimiter === " ") {
    return line.trim().split(/\s+/);
  }
  return line.split(delimiter).map((c) => c.trim());
}

function sniffDelimiter(line: string): string {
  for (const candidate of [",", ";", "\t"]) {
    if (line.includes(candidate)) {
      return candidate;
    }
  }
  return " ";
}

export function parseDelimited(text: string): Matrix {
  const lines = text
    .split(/\r?\n/)
    .map((l) => l.trim())
    .filter((l) => l.length > 0 && !l.startsWith("#"));
  if (lines.length === 0) {
    throw new Error("delimited input has no data rows");
  }
  const delimiter = sniffDelimiter(lines[0]);
  const rows: number[][] = [];
  for (const [index, line] of lines.entries()) {
    const cells = splitLine(line, delimiter);
    const row = cells.map((cell) => {
      const v = Number(cell);
      if (cell.length === 0 || Number.isNaN(v)) {
        throw new Error(`row ${index}: cell '${cell}' is not a number`);
      }
      return v;
    });
    if (rows.length > 0 && row.length !== rows[0].length) {
      throw new Error(
        `row ${index} has ${row.length} columns, expected ${rows[0].length}`
      );
    }
    rows.push(row);
  }
  const cols = rows[0].length;
  const data = new Float64Array(rows.length * cols);
  rows.forEach((row, i) => row.forEach((v, j) => (data[i * cols + j] = v)));
  return { rows: rows.length, cols, data, sourceIsFloat32: false };
}

/**
 * In-memory 2-D float matrix shared by the parsers and the EMB1 writer.
 * Values are kept at source precision (float64) until the final encode,
 * so a float32 input survives the pipeline bit-exactly.
 */

export interface Matrix {
  rows: number;
  cols: number;
  /** row-major, length rows*cols */
  data: Float64Array;
  /** true when the source dtype was already 32-bit */
  sourceIsFloat32: boolean;
}

export function assertFinite(m: Matrix): void {
  for (let i = 0; i < m.data.length; i++) {
    if (!Number.isFinite(m.data[i])) {
      const row = Math.floor(i / m.cols);
      const col = i % m.cols;
      throw new Error(`input contains NaN or infinity at row ${row}, column ${col}`);
    }
  }
}

/** Unit-normalize every row in float64 (the EMB1 encode rounds to float32). */
export function normalizeRows(m: Matrix): Matrix {
  const out = new Float64Array(m.data.length);
  for (let i = 0; i < m.rows; i++) {
    let sumSq = 0;
    for (let j = 0; j < m.cols; j++) {
      const v = m.data[i * m.cols + j];
      sumSq += v * v;
    }
    const norm = Math.sqrt(sumSq);
    if (norm < 1e-12) {
      throw new Error(`zero-norm row ${i}: cannot normalize`);
    }
    for (let j = 0; j < m.cols; j++) {
      out[i * m.cols + j] = m.data[i * m.cols + j] / norm;
    }
  }
  return { rows: m.rows, cols: m.cols, data: out, sourceIsFloat32: false };
}

/** Row-concatenate matrices of equal width (multi-file exports). */
export function concatRows(parts: Matrix[]): Matrix {
  if (parts.length === 0) {
    throw new Error("no input matrices");
  }
  const cols = parts[0].cols;
  let rows = 0;
  for (const p of parts) {
    if (p.cols !== cols) {
      throw new Error(`inputs disagree on dimension: ${p.cols} vs ${cols}`);
    }
    rows += p.rows;
  }
  const data = new Float64Array(rows * cols);
  let offset = 0;
  for (const p of parts) {
    data.set(p.data, offset);
    offset += p.data.length;
  }
  return {
    rows,
    cols,
    data,
    sourceIsFloat32: parts.every((p) => p.sourceIsFloat32),
  };
}

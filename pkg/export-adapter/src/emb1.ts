/**
 * EMB1 writer, mirroring the consumer's contract byte for byte:
 * "EMB1" | version u32 LE = 1 | rows u32 LE | dim u32 LE | dtype u8 = 0
 * (float32 LE) | row-major payload. A JSON manifest sidecar at
 * <path>.manifest.json names the producing space and modality.
 */

import * as fs from "node:fs";

import { Matrix } from "./matrix";

export const HEADER_SIZE = 17;

export interface ManifestFields {
  spaceId: string;
  modality: string;
  normalized: boolean;
  sourceNote: string;
}

export function encodeEmb1(m: Matrix): Buffer {
  const header = Buffer.alloc(HEADER_SIZE);
  header.write("EMB1", 0, "latin1");
  header.writeUInt32LE(1, 4);
  header.writeUInt32LE(m.rows, 8);
  header.writeUInt32LE(m.cols, 12);
  header.writeUInt8(0, 16);
  const payload = Buffer.alloc(m.data.length * 4);
  for (let k = 0; k < m.data.length; k++) {
    payload.writeFloatLE(Math.fround(m.data[k]), k * 4);
  }
  return Buffer.concat([header, payload]);
}

export function writeEmb1(m: Matrix, fields: ManifestFields, outputPath: string): void {
  fs.writeFileSync(outputPath, encodeEmb1(m));
  const manifest = {
    dim: m.cols,
    modality: fields.modality,
    normalized: fields.normalized,
    rows: m.rows,
    source_note: fields.sourceNote,
    space_id: fields.spaceId,
  };
  fs.writeFileSync(outputPath + ".manifest.json", JSON.stringify(manifest, null, 2) + "\n");
}

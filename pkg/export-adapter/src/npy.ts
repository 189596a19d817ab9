/**
 * Reader for the standard binary tensor dump format (.npy, versions 1-3).
 *
 * Layout: magic \x93NUMPY | major u8 | minor u8 | header length (u16 LE for
 * v1, u32 LE otherwise) | python-literal header dict | raw array bytes.
 * Accepts 2-D float32/float64 arrays in either byte order and either memory
 * order; anything else is rejected with a reason.
 */

import { Matrix } from "./matrix";

const MAGIC = Buffer.from("\x93NUMPY", "latin1");

interface Header {
  descr: string;
  fortranOrder: boolean;
  shape: number[];
}

function parseHeader(text: string): Header {
  const descr = /'descr'\s*:\s*'([^']+)'/.exec(text);
  const fortran = /'fortran_order'\s*:\s*(True|False)/.exec(text);
  const shape = /'shape'\s*:\s*\(([^)]*)\)/.exec(text);
  if (!descr || !fortran || !shape) {
    throw new Error(`unparseable .npy header: ${text.trim()}`);
  }
  const dims = shape[1]
    .split(",")
    .map((s) => s.trim())
    .filter((s) => s.length > 0)
    .map((s) => {
      const n = Number(s);
      if (!Number.isInteger(n) || n < 0) {
        throw new Error(`bad shape entry '${s}'`);
      }
      return n;
    });
  return { descr: descr[1], fortranOrder: fortran[1] === "True", shape: dims };
}

export function parseNpy(buf: Buffer): Matrix {
  if (buf.length < 10 || !buf.subarray(0, 6).equals(MAGIC)) {
    throw new Error("not a .npy file (bad magic)");
  }
  const major = buf[6];
  let headerLen: number;
  let headerStart: number;
  if (major === 1) {
    headerLen = buf.readUInt16LE(8);
    headerStart = 10;
  } else if (major === 2 || major === 3) {
    headerLen = buf.readUInt32LE(8);
    headerStart = 12;
  } else {
    throw new Error(`unsupported .npy version ${major}`);
  }
  const header = parseHeader(buf.subarray(headerStart, headerStart + headerLen).toString("latin1"));

  if (header.shape.length !== 2) {
    throw new Error(`expected 2-D matrix, got ${header.shape.length}-D shape (${header.shape.join(", ")})`);
  }
  const [rows, cols] = header.shape;
  if (rows < 1 || cols < 1) {
    throw new Error(`matrix must be at least 1x1, got ${rows}x${cols}`);
  }

  const m = /^([<>|=])?(f)(4|8)$/.exec(header.descr);
  if (!m) {
    throw new Error(`unsupported dtype '${header.descr}' (need float32 or float64)`);
  }
  const littleEndian = m[1] !== ">";
  const itemSize = Number(m[3]);
  const count = rows * cols;
  const body = buf.subarray(headerStart + headerLen);
  if (body.length < count * itemSize) {
    throw new Error(
      `payload too short: need ${count * itemSize} bytes for ${rows}x${cols}, have ${body.length}`
    );
  }

  const view = new DataView(body.buffer, body.byteOffset, count * itemSize);
  const data = new Float64Array(count);
  for (let k = 0; k < count; k++) {
    const raw =
      itemSize === 4
        ? view.getFloat32(k * 4, littleEndian)
        : view.getFloat64(k * 8, littleEndian);
    if (header.fortranOrder) {
      // stored column-major: linear index k walks columns first
      const i = k % rows;
      const j = Math.floor(k / rows);
      data[i * cols + j] = raw;
    } else {
      data[k] = raw;
    }
  }
  return { rows, cols, data, sourceIsFloat32: itemSize === 4 };
}

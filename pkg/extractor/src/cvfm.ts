/** CVFM feature-file writer/reader: the interchange boundary with the
 * localization engine. Layout (little-endian): "CVFM", u32 version=1,
 * u32 h, u32 w, u32 D, then h*w tokens x D channels as float32,
 * token-major (row i, col j -> flat index i*w + j). */

import { mkdirSync, readFileSync, renameSync, writeFileSync } from "node:fs";
import { dirname, join } from "node:path";

export const CVFM_MAGIC = "CVFM";
export const CVFM_VERSION = 1;

export function encodeCvfm(h: number, w: number, depth: number, tokens: Float64Array): Buffer {
  if (tokens.length !== h * w * depth) {
    throw new Error(`token payload ${tokens.length} != ${h}*${w}*${depth}`);
  }
  const buf = Buffer.alloc(4 + 16 + 4 * tokens.length);
  buf.write(CVFM_MAGIC, 0, "ascii");
  buf.writeUInt32LE(CVFM_VERSION, 4);
  buf.writeUInt32LE(h, 8);
  buf.writeUInt32LE(w, 12);
  buf.writeUInt32LE(depth, 16);
  for (let i = 0; i < tokens.length; i++) {
    buf.writeFloatLE(Math.fround(tokens[i]), 20 + 4 * i);
  }
  return buf;
}

/** Atomic write: temp file in the target directory, then rename. */
export function writeCvfm(
  path: string,
  h: number,
  w: number,
  depth: number,
  tokens: Float64Array,
): void {
  mkdirSync(dirname(path), { recursive: true });
  const tmp = join(dirname(path), `.tmp-${process.pid}-${Math.random().toString(36).slice(2)}`);
  writeFileSync(tmp, encodeCvfm(h, w, depth, tokens));
  renameSync(tmp, path);
}

export interface CvfmFile {
  h: number;
  w: number;
  depth: number;
  tokens: Float64Array;
}

export function readCvfm(path: string): CvfmFile {
  const buf = readFileSync(path);
  if (buf.length < 20 || buf.subarray(0, 4).toString("ascii") !== CVFM_MAGIC) {
    throw new Error(`${path}: bad CVFM magic`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== CVFM_VERSION) throw new Error(`${path}: unsupported version ${version}`);
  const h = buf.readUInt32LE(8);
  const w = buf.readUInt32LE(12);
  const depth = buf.readUInt32LE(16);
  const count = h * w * depth;
  if (buf.length !== 20 + 4 * count) {
    throw new Error(`${path}: payload size mismatch`);
  }
  const tokens = new Float64Array(count);
  for (let i = 0; i < count; i++) tokens[i] = buf.readFloatLE(20 + 4 * i);
  return { h, w, depth, tokens };
}

/** Reader for the localization engine's manifest text format: a `#` header
 * line declaring coordinate_mode and split, then 9 tab-separated fields per
 * record (id, city, lat/easting, lon/northing, ground_ref, sat_ref,
 * ground_date, sat_date, covering_ids). */

import { readFileSync } from "node:fs";

export interface ManifestRecord {
  id: number;
  city: string;
  y: number;
  x: number;
  groundRef: string;
  satRef: string;
}

export interface Manifest {
  coordinateMode: string;
  split: string;
  records: ManifestRecord[];
}

export function loadManifest(path: string): Manifest {
  const text = readFileSync(path, "utf-8");
  let mode: string | null = null;
  let split: string | null = null;
  const records: ManifestRecord[] = [];
  const seen = new Set<number>();
  const lines = text.split("\n");
  for (let lineno = 1; lineno <= lines.length; lineno++) {
    const line = lines[lineno - 1];
    if (!line.trim()) continue;
    if (line.startsWith("#")) {
      for (const kv of line.slice(1).trim().split(/\s+/)) {
        const eq = kv.indexOf("=");
        if (eq < 0) continue;
        const key = kv.slice(0, eq);
        const value = kv.slice(eq + 1);
        if (key === "coordinate_mode") mode = value;
        if (key === "split") split = value;
      }
      continue;
    }
    const cols = line.split("\t");
    if (cols.length !== 9) {
      throw new Error(`${path}:${lineno}: expected 9 fields, got ${cols.length}`);
    }
    const id = Number(cols[0]);
    if (!Number.isInteger(id) || id < 0) {
      throw new Error(`${path}:${lineno}: bad record id ${cols[0]}`);
    }
    if (seen.has(id)) throw new Error(`${path}:${lineno}: duplicate id ${id}`);
    seen.add(id);
    records.push({
      id,
      city: cols[1],
      y: Number(cols[2]),
      x: Number(cols[3]),
      groundRef: cols[4],
      satRef: cols[5],
    });
  }
  if (mode === null || split === null) {
    throw new Error(`${path}: missing coordinate_mode/split header line`);
  }
  return { coordinateMode: mode, split, records };
}

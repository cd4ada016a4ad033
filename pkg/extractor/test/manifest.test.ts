import { strict as assert } from "node:assert";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { test } from "node:test";

import { loadManifest } from "../src/manifest.js";

function write(content: string): string {
  const dir = mkdtempSync(join(tmpdir(), "manifest-"));
  const path = join(dir, "manifest.tsv");
  writeFileSync(path, content);
  return path;
}

const HEADER = "# coordinate_mode=WGS84 split=train\n";
const ROW = "5\tlondon\t51.5\t-0.12\timg/g5.ppm\timg/s5.ppm\t2021-03-04\t-\t-\n";

test("parses the engine manifest format", () => {
  const m = loadManifest(write(HEADER + ROW));
  assert.equal(m.coordinateMode, "WGS84");
  assert.equal(m.split, "train");
  assert.equal(m.records.length, 1);
  assert.deepEqual(m.records[0], {
    id: 5, city: "london", y: 51.5, x: -0.12,
    groundRef: "img/g5.ppm", satRef: "img/s5.ppm",
  });
});

test("missing header line is rejected", () => {
  assert.throws(() => loadManifest(write(ROW)), /header/);
});

test("wrong field count reports the line number", () => {
  assert.throws(() => loadManifest(write(HEADER + "1\tcity\t0\t0\n")), /:2:/);
});

test("duplicate ids are rejected", () => {
  assert.throws(() => loadManifest(write(HEADER + ROW + ROW)), /duplicate/);
});

import { strict as assert } from "node:assert";
import { test } from "node:test";

import {
  augmentPair,
  blurSharpen,
  colorJitter,
  compressionArtifacts,
  gridMask,
  rollPanorama,
  rotateSatellite,
} from "../src/augment.js";
import { Image, makeImage } from "../src/image.js";
import { Rng } from "../src/rng.js";

function patternImage(width: number, height: number, salt = 1): Image {
  const img = makeImage(width, height);
  for (let i = 0; i < img.data.length; i++) {
    img.data[i] = (i * 31 + salt * 17) % 256;
  }
  return img;
}

function pixelwiseEqual(a: Image, b: Image): boolean {
  if (a.width !== b.width || a.height !== b.height) return false;
  for (let i = 0; i < a.data.length; i++) {
    if (a.data[i] !== b.data[i]) return false;
  }
  return true;
}

test("roll by zero is the identity, pixelwise", () => {
  const img = patternImage(64, 32);
  assert.ok(pixelwiseEqual(rollPanorama(img, 0), img));
});

test("double 180-degree roll restores the panorama, pixelwise", () => {
  const img = patternImage(64, 32);
  const half = Math.round((180 / 360) * img.width);
  const once = rollPanorama(img, half);
  assert.ok(!pixelwiseEqual(once, img));
  assert.ok(pixelwiseEqual(rollPanorama(once, half), img));
});

test("rolls compose additively modulo the width", () => {
  const img = patternImage(48, 24);
  const a = rollPanorama(rollPanorama(img, 13), 20);
  const b = rollPanorama(img, 33);
  assert.ok(pixelwiseEqual(a, b));
});

test("satellite rotation by zero is the identity, pixelwise", () => {
  const img = patternImage(32, 32);
  assert.ok(pixelwiseEqual(rotateSatellite(img, 0), img));
});

test("double 180-degree satellite rotation is the identity, pixelwise", () => {
  const img = patternImage(32, 32);
  const once = rotateSatellite(img, 180);
  assert.ok(!pixelwiseEqual(once, img));
  assert.ok(pixelwiseEqual(rotateSatellite(once, 180), img));
});

test("general rotation stays in range and is deterministic", () => {
  const img = patternImage(32, 32);
  const a = rotateSatellite(img, 37.5);
  const b = rotateSatellite(img, 37.5);
  assert.ok(pixelwiseEqual(a, b));
  for (const v of a.data) {
    assert.ok(v >= 0 && v <= 255);
  }
});

test("photometric ops are deterministic under a fixed stream", () => {
  const img = patternImage(24, 24);
  for (const op of [colorJitter, blurSharpen, compressionArtifacts, gridMask]) {
    const a = op(img, new Rng(7));
    const b = op(img, new Rng(7));
    assert.ok(pixelwiseEqual(a, b), op.name);
    const c = op(img, new Rng(8));
    assert.ok(a.width === c.width);
  }
});

test("augmentPair rolls panorama and satellite together", () => {
  const ground = patternImage(64, 32); // 2:1 panorama
  const sat = patternImage(32, 32, 2);
  const res = augmentPair(ground, sat, 1.0, new Rng(3));
  assert.equal(res.warning, undefined);
  assert.notEqual(res.rolledDegrees, null);
  const repeat = augmentPair(ground, sat, 1.0, new Rng(3));
  assert.ok(pixelwiseEqual(res.ground, repeat.ground));
  assert.ok(pixelwiseEqual(res.satellite, repeat.satellite));
});

test("augmentPair skips the roll for non-panoramic ground images", () => {
  const ground = patternImage(40, 32); // not 2:1
  const sat = patternImage(32, 32, 2);
  const res = augmentPair(ground, sat, 1.0, new Rng(5));
  assert.equal(res.rolledDegrees, null);
  assert.ok(res.warning && res.warning.includes("roll skipped"));
});

test("roll probability zero never rolls", () => {
  const ground = patternImage(64, 32);
  const sat = patternImage(32, 32, 2);
  for (let seed = 0; seed < 5; seed++) {
    const res = augmentPair(ground, sat, 0.0, new Rng(seed));
    assert.equal(res.rolledDegrees, null);
    assert.equal(res.warning, undefined);
  }
});

/** Paired training-time augmentations.
 *
 * The ground view is a full 360-degree panorama, so a change of heading is a
 * horizontal circular roll; the satellite view rotates by the matching angle
 * (center rotation, reflect padding). The remaining photometric ops use
 * documented constants: the magnitudes are implementation choices, not
 * published values.
 */

import { Image, cloneImage, makeImage } from "./image.js";
import { Rng } from "./rng.js";

export const JITTER_GAIN = 0.15; // per-channel gain in [1 +- this]
export const JITTER_OFFSET = 12; // per-channel offset in [+- this] (0..255 scale)
export const BLUR_SHARPEN_MAX = 0.5; // blend factor toward blurred/sharpened
export const QUANT_LEVELS_MIN = 24; // block-quantization coarseness (compression stand-in)
export const QUANT_LEVELS_MAX = 64;
export const GRID_MASK_CELLS = 8; // grid cells per side
export const GRID_MASK_PROB = 0.25; // chance a cell is masked

/** Horizontal circular roll by whole pixels (exact; no resampling). */
export function rollPanorama(img: Image, offsetPx: number): Image {
  const { width, height } = img;
  const off = ((offsetPx % width) + width) % width;
  if (off === 0) return cloneImage(img);
  const out = makeImage(width, height);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const sx = (x - off + width) % width;
      for (let c = 0; c < 3; c++) {
        out.data[(y * width + x) * 3 + c] = img.data[(y * width + sx) * 3 + c];
      }
    }
  }
  return out;
}

function reflect(i: number, n: number): number {
  if (n === 1) return 0;
  const period = 2 * n - 2;
  let m = ((i % period) + period) % period;
  if (m >= n) m = period - m;
  return m;
}

/** Center rotation by degrees with bilinear sampling and reflect padding.
 * Multiples of 90 degrees are exact index permutations (pixelwise). */
export function rotateSatellite(img: Image, degrees: number): Image {
  const turns = ((degrees % 360) + 360) % 360;
  if (turns === 0) return cloneImage(img);
  const { width, height } = img;
  if (turns === 180) {
    const out = makeImage(width, height);
    for (let y = 0; y < height; y++) {
      for (let x = 0; x < width; x++) {
        const src = ((height - 1 - y) * width + (width - 1 - x)) * 3;
        const dst = (y * width + x) * 3;
        out.data[dst] = img.data[src];
        out.data[dst + 1] = img.data[src + 1];
        out.data[dst + 2] = img.data[src + 2];
      }
    }
    return out;
  }
  const rad = (turns * Math.PI) / 180;
  const cos = Math.cos(rad);
  const sin = Math.sin(rad);
  const cx = (width - 1) / 2;
  const cy = (height - 1) / 2;
  const out = makeImage(width, height);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      // inverse map: sample the source at the un-rotated location
      const dx = x - cx;
      const dy = y - cy;
      const sxf = cx + cos * dx + sin * dy;
      const syf = cy - sin * dx + cos * dy;
      const x0 = Math.floor(sxf);
      const y0 = Math.floor(syf);
      const wx = sxf - x0;
      const wy = syf - y0;
      for (let c = 0; c < 3; c++) {
        const p00 = img.data[(reflect(y0, height) * width + reflect(x0, width)) * 3 + c];
        const p01 = img.data[(reflect(y0, height) * width + reflect(x0 + 1, width)) * 3 + c];
        const p10 = img.data[(reflect(y0 + 1, height) * width + reflect(x0, width)) * 3 + c];
        const p11 = img.data[(reflect(y0 + 1, height) * width + reflect(x0 + 1, width)) * 3 + c];
        out.data[(y * width + x) * 3 + c] =
          (1 - wy) * ((1 - wx) * p00 + wx * p01) + wy * ((1 - wx) * p10 + wx * p11);
      }
    }
  }
  return out;
}

export function colorJitter(img: Image, rng: Rng): Image {
  const out = cloneImage(img);
  for (let c = 0; c < 3; c++) {
    const gain = rng.uniform(1 - JITTER_GAIN, 1 + JITTER_GAIN);
    const offset = rng.uniform(-JITTER_OFFSET, JITTER_OFFSET);
    for (let i = c; i < out.data.length; i += 3) {
      out.data[i] = Math.max(0, Math.min(255, out.data[i] * gain + offset));
    }
  }
  return out;
}

function boxBlur(img: Image): Image {
  const { width, height } = img;
  const out = makeImage(width, height);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      for (let c = 0; c < 3; c++) {
        let acc = 0;
        for (let dy = -1; dy <= 1; dy++) {
          for (let dx = -1; dx <= 1; dx++) {
            acc += img.data[(reflect(y + dy, height) * width + reflect(x + dx, width)) * 3 + c];
          }
        }
        out.data[(y * width + x) * 3 + c] = acc / 9;
      }
    }
  }
  return out;
}

/** Blend toward a box blur (positive amount) or unsharp mask (negative). */
export function blurSharpen(img: Image, rng: Rng): Image {
  const amount = rng.uniform(-BLUR_SHARPEN_MAX, BLUR_SHARPEN_MAX);
  const blurred = boxBlur(img);
  const out = cloneImage(img);
  for (let i = 0; i < out.data.length; i++) {
    const v = img.data[i] + amount * (blurred.data[i] - img.data[i]);
    out.data[i] = Math.max(0, Math.min(255, v));
  }
  return out;
}

/** Compression stand-in: coarse value quantization (posterization). */
export function compressionArtifacts(img: Image, rng: Rng): Image {
  const levels = Math.round(rng.uniform(QUANT_LEVELS_MIN, QUANT_LEVELS_MAX));
  const step = 255 / (levels - 1);
  const out = cloneImage(img);
  for (let i = 0; i < out.data.length; i++) {
    out.data[i] = Math.round(out.data[i] / step) * step;
  }
  return out;
}

/** Mask random grid cells to the image mean (occlusion stand-in). */
export function gridMask(img: Image, rng: Rng): Image {
  const out = cloneImage(img);
  let mean = 0;
  for (let i = 0; i < img.data.length; i++) mean += img.data[i];
  mean /= img.data.length;
  const cw = Math.ceil(img.width / GRID_MASK_CELLS);
  const ch = Math.ceil(img.height / GRID_MASK_CELLS);
  for (let gy = 0; gy < GRID_MASK_CELLS; gy++) {
    for (let gx = 0; gx < GRID_MASK_CELLS; gx++) {
      if (rng.next() >= GRID_MASK_PROB) continue;
      for (let y = gy * ch; y < Math.min((gy + 1) * ch, img.height); y++) {
        for (let x = gx * cw; x < Math.min((gx + 1) * cw, img.width); x++) {
          const o = (y * img.width + x) * 3;
          out.data[o] = mean;
          out.data[o + 1] = mean;
          out.data[o + 2] = mean;
        }
      }
    }
  }
  return out;
}

export interface AugmentResult {
  ground: Image;
  satellite: Image;
  rolledDegrees: number | null;
  warning?: string;
}

/** Heading roll on the panorama with the matching satellite rotation, then
 * seeded photometric noise on both views. */
export function augmentPair(
  ground: Image,
  satellite: Image,
  rollProbability: number,
  rng: Rng,
): AugmentResult {
  let g = ground;
  let s = satellite;
  let rolled: number | null = null;
  let warning: string | undefined;
  const wantRoll = rng.next() < rollProbability;
  const theta = rng.uniform(0, 360);
  if (wantRoll) {
    if (ground.width !== 2 * ground.height) {
      warning = `ground image ${ground.width}x${ground.height} is not a 2:1 panorama; roll skipped`;
    } else {
      const offset = Math.round((theta / 360) * ground.width);
      g = rollPanorama(g, offset);
      s = rotateSatellite(s, theta);
      rolled = theta;
    }
  }
  g = gridMask(compressionArtifacts(blurSharpen(colorJitter(g, rng), rng), rng), rng);
  s = gridMask(compressionArtifacts(blurSharpen(colorJitter(s, rng), rng), rng), rng);
  return { ground: g, satellite: s, rolledDegrees: rolled, warning };
}

/** Minimal RGB image container with binary PPM (P6) IO and bilinear resize.
 *
 * Pixel values are float64 in [0, 255], interleaved RGB. PPM keeps the
 * package free of native codec dependencies; convert other formats offline.
 */

import { readFileSync, writeFileSync } from "node:fs";

export interface Image {
  width: number;
  height: number;
  data: Float64Array; // length = width * height * 3, row-major, RGB
}

export function makeImage(width: number, height: number): Image {
  return { width, height, data: new Float64Array(width * height * 3) };
}

export function cloneImage(img: Image): Image {
  return { width: img.width, height: img.height, data: img.data.slice() };
}

export function readPpm(path: string): Image {
  const buf = readFileSync(path);
  // header: "P6" <ws> width <ws> height <ws> maxval <single ws> payload
  let pos = 0;
  const token = (): string => {
    while (pos < buf.length && /\s/.test(String.fromCharCode(buf[pos]))) pos++;
    if (buf[pos] === 0x23) {
      // comment line
      while (pos < buf.length && buf[pos] !== 0x0a) pos++;
      return token();
    }
    const start = pos;
    while (pos < buf.length && !/\s/.test(String.fromCharCode(buf[pos]))) pos++;
    return buf.subarray(start, pos).toString("ascii");
  };
  const magic = token();
  if (magic !== "P6") throw new Error(`${path}: not a binary PPM (magic ${magic})`);
  const width = parseInt(token(), 10);
  const height = parseInt(token(), 10);
  const maxval = parseInt(token(), 10);
  if (!(width > 0 && height > 0) || maxval !== 255) {
    throw new Error(`${path}: unsupported PPM header ${width}x${height}/${maxval}`);
  }
  pos += 1; // single whitespace after maxval
  const need = width * height * 3;
  if (buf.length - pos < need) throw new Error(`${path}: truncated PPM payload`);
  const img = makeImage(width, height);
  for (let i = 0; i < need; i++) img.data[i] = buf[pos + i];
  return img;
}

export function writePpm(path: string, img: Image): void {
  const header = Buffer.from(`P6\n${img.width} ${img.height}\n255\n`, "ascii");
  const payload = Buffer.alloc(img.width * img.height * 3);
  for (let i = 0; i < payload.length; i++) {
    payload[i] = Math.max(0, Math.min(255, Math.round(img.data[i])));
  }
  writeFileSync(path, Buffer.concat([header, payload]));
}

export function resizeBilinear(img: Image, width: number, height: number): Image {
  if (width === img.width && height === img.height) return cloneImage(img);
  const out = makeImage(width, height);
  const sx = img.width / width;
  const sy = img.height / height;
  for (let y = 0; y < height; y++) {
    const fy = Math.min(img.height - 1, Math.max(0, (y + 0.5) * sy - 0.5));
    const y0 = Math.floor(fy);
    const y1 = Math.min(img.height - 1, y0 + 1);
    const wy = fy - y0;
    for (let x = 0; x < width; x++) {
      const fx = Math.min(img.width - 1, Math.max(0, (x + 0.5) * sx - 0.5));
      const x0 = Math.floor(fx);
      const x1 = Math.min(img.width - 1, x0 + 1);
      const wx = fx - x0;
      for (let c = 0; c < 3; c++) {
        const p00 = img.data[(y0 * img.width + x0) * 3 + c];
        const p01 = img.data[(y0 * img.width + x1) * 3 + c];
        const p10 = img.data[(y1 * img.width + x0) * 3 + c];
        const p11 = img.data[(y1 * img.width + x1) * 3 + c];
        out.data[(y * width + x) * 3 + c] =
          (1 - wy) * ((1 - wx) * p00 + wx * p01) + wy * ((1 - wx) * p10 + wx * p11);
      }
    }
  }
  return out;
}

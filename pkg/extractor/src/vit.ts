/** Vision-transformer token extractor.
 *
 * Standard pre-norm ViT: 14x14 patch embedding, learned position embeddings,
 * a class token, and stacked attention+MLP blocks. Per the localization
 * framework the final layer norm and head are removed and only the patch
 * tokens (class token dropped) are exported, as an (h*w) x D grid.
 *
 * Weights come from a binary file when published weights are available
 * offline (see loadWeights), or from a seeded initializer - dims, layout and
 * determinism are identical either way.
 */

import { readFileSync, writeFileSync } from "node:fs";

import { Image, resizeBilinear } from "./image.js";
import { Rng, deriveRng } from "./rng.js";

export type ModelSize = "small" | "base";

export interface VitConfig {
  modelSize: ModelSize;
  dim: number;
  heads: number;
  blocks: number;
  patch: number;
  inputSize: number;
  mlpRatio: number;
}

export const MODEL_DIMS: Record<ModelSize, { dim: number; heads: number; blocks: number }> = {
  small: { dim: 384, heads: 6, blocks: 12 },
  base: { dim: 768, heads: 12, blocks: 12 },
};

export function vitConfig(
  modelSize: ModelSize,
  inputSize: number,
  blocks?: number,
): VitConfig {
  const spec = MODEL_DIMS[modelSize];
  if (!spec) throw new Error(`unknown model size ${modelSize}`);
  if (inputSize % 14 !== 0 || inputSize < 14) {
    throw new Error(`input size ${inputSize} must be a positive multiple of 14`);
  }
  return {
    modelSize,
    dim: spec.dim,
    heads: spec.heads,
    blocks: blocks ?? spec.blocks,
    patch: 14,
    inputSize,
    mlpRatio: 4,
  };
}

export function gridSide(cfg: VitConfig): number {
  return cfg.inputSize / cfg.patch;
}

interface BlockWeights {
  ln1g: Float64Array;
  ln1b: Float64Array;
  qkvW: Float64Array; // dim x 3dim
  qkvB: Float64Array;
  projW: Float64Array; // dim x dim
  projB: Float64Array;
  ln2g: Float64Array;
  ln2b: Float64Array;
  fc1W: Float64Array; // dim x mlp
  fc1B: Float64Array;
  fc2W: Float64Array; // mlp x dim
  fc2B: Float64Array;
}

export interface VitWeights {
  patchW: Float64Array; // (patch*patch*3) x dim
  patchB: Float64Array;
  clsToken: Float64Array;
  posEmbed: Float64Array; // (n+1) x dim
  blocks: BlockWeights[];
}

function filled(rng: Rng, n: number, scale: number): Float64Array {
  const out = new Float64Array(n);
  for (let i = 0; i < n; i++) out[i] = rng.normal() * scale;
  return out;
}

export function randomWeights(cfg: VitConfig, seed: number): VitWeights {
  const n = gridSide(cfg) * gridSide(cfg);
  const d = cfg.dim;
  const mlp = d * cfg.mlpRatio;
  const patchDim = cfg.patch * cfg.patch * 3;
  const rng = deriveRng(seed, 0x5649);
  const blocks: BlockWeights[] = [];
  for (let b = 0; b < cfg.blocks; b++) {
    blocks.push({
      ln1g: new Float64Array(d).fill(1),
      ln1b: new Float64Array(d),
      qkvW: filled(rng, d * 3 * d, 1 / Math.sqrt(d)),
      qkvB: new Float64Array(3 * d),
      projW: filled(rng, d * d, 1 / Math.sqrt(d)),
      projB: new Float64Array(d),
      ln2g: new Float64Array(d).fill(1),
      ln2b: new Float64Array(d),
      fc1W: filled(rng, d * mlp, 1 / Math.sqrt(d)),
      fc1B: new Float64Array(mlp),
      fc2W: filled(rng, mlp * d, 1 / Math.sqrt(mlp)),
      fc2B: new Float64Array(d),
    });
  }
  return {
    patchW: filled(rng, patchDim * d, 1 / Math.sqrt(patchDim)),
    patchB: new Float64Array(d),
    clsToken: filled(rng, d, 0.02),
    posEmbed: filled(rng, (n + 1) * d, 0.02),
    blocks,
  };
}

/** Weights file: "CVWT", u32 version=1, u32 tensor count, then per tensor a
 * u16 name length, utf-8 name, u32 element count, float32 data (LE).
 * Tensor names: patchW patchB clsToken posEmbed block{i}.{ln1g,...,fc2B}. */
export function loadWeights(path: string, cfg: VitConfig): VitWeights {
  const buf = readFileSync(path);
  if (buf.subarray(0, 4).toString("ascii") !== "CVWT") {
    throw new Error(`${path}: bad weights magic`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== 1) throw new Error(`${path}: unsupported weights version ${version}`);
  let pos = 8;
  const count = buf.readUInt32LE(pos);
  pos += 4;
  const tensors = new Map<string, Float64Array>();
  for (let i = 0; i < count; i++) {
    const nameLen = buf.readUInt16LE(pos);
    pos += 2;
    const name = buf.subarray(pos, pos + nameLen).toString("utf-8");
    pos += nameLen;
    const elems = buf.readUInt32LE(pos);
    pos += 4;
    const arr = new Float64Array(elems);
    for (let k = 0; k < elems; k++) arr[k] = buf.readFloatLE(pos + 4 * k);
    pos += 4 * elems;
    tensors.set(name, arr);
  }
  const grab = (name: string, len: number): Float64Array => {
    const arr = tensors.get(name);
    if (!arr) throw new Error(`${path}: missing tensor ${name}`);
    if (arr.length !== len) {
      throw new Error(`${path}: tensor ${name} has ${arr.length} elems, expected ${len}`);
    }
    return arr;
  };
  const n = gridSide(cfg) * gridSide(cfg);
  const d = cfg.dim;
  const mlp = d * cfg.mlpRatio;
  const patchDim = cfg.patch * cfg.patch * 3;
  const blocks: BlockWeights[] = [];
  for (let b = 0; b < cfg.blocks; b++) {
    blocks.push({
      ln1g: grab(`block${b}.ln1g`, d),
      ln1b: grab(`block${b}.ln1b`, d),
      qkvW: grab(`block${b}.qkvW`, d * 3 * d),
      qkvB: grab(`block${b}.qkvB`, 3 * d),
      projW: grab(`block${b}.projW`, d * d),
      projB: grab(`block${b}.projB`, d),
      ln2g: grab(`block${b}.ln2g`, d),
      ln2b: grab(`block${b}.ln2b`, d),
      fc1W: grab(`block${b}.fc1W`, d * mlp),
      fc1B: grab(`block${b}.fc1B`, mlp),
      fc2W: grab(`block${b}.fc2W`, mlp * d),
      fc2B: grab(`block${b}.fc2B`, d),
    });
  }
  return {
    patchW: grab("patchW", patchDim * d),
    patchB: grab("patchB", d),
    clsToken: grab("clsToken", d),
    posEmbed: grab("posEmbed", (n + 1) * d),
    blocks,
  };
}

function* namedTensors(cfg: VitConfig, w: VitWeights): Iterable<[string, Float64Array]> {
  yield ["patchW", w.patchW];
  yield ["patchB", w.patchB];
  yield ["clsToken", w.clsToken];
  yield ["posEmbed", w.posEmbed];
  for (let b = 0; b < cfg.blocks; b++) {
    const blk = w.blocks[b];
    yield [`block${b}.ln1g`, blk.ln1g];
    yield [`block${b}.ln1b`, blk.ln1b];
    yield [`block${b}.qkvW`, blk.qkvW];
    yield [`block${b}.qkvB`, blk.qkvB];
    yield [`block${b}.projW`, blk.projW];
    yield [`block${b}.projB`, blk.projB];
    yield [`block${b}.ln2g`, blk.ln2g];
    yield [`block${b}.ln2b`, blk.ln2b];
    yield [`block${b}.fc1W`, blk.fc1W];
    yield [`block${b}.fc1B`, blk.fc1B];
    yield [`block${b}.fc2W`, blk.fc2W];
    yield [`block${b}.fc2B`, blk.fc2B];
  }
}

/** Counterpart of loadWeights, used to convert published weights offline. */
export function saveWeights(path: string, cfg: VitConfig, weights: VitWeights): void {
  const tensors = [...namedTensors(cfg, weights)];
  const parts: Buffer[] = [];
  const header = Buffer.alloc(12);
  header.write("CVWT", 0, "ascii");
  header.writeUInt32LE(1, 4);
  header.writeUInt32LE(tensors.length, 8);
  parts.push(header);
  for (const [name, arr] of tensors) {
    const raw = Buffer.from(name, "utf-8");
    const head = Buffer.alloc(2 + raw.length + 4);
    head.writeUInt16LE(raw.length, 0);
    raw.copy(head, 2);
    head.writeUInt32LE(arr.length, 2 + raw.length);
    const data = Buffer.alloc(4 * arr.length);
    for (let i = 0; i < arr.length; i++) data.writeFloatLE(Math.fround(arr[i]), 4 * i);
    parts.push(head, data);
  }
  writeFileSync(path, Buffer.concat(parts));
}

// ImageNet channel statistics used by the published backbone preprocessing
const MEAN = [0.485, 0.456, 0.406];
const STD = [0.229, 0.224, 0.225];

function matmul(
  a: Float64Array,
  b: Float64Array,
  m: number,
  k: number,
  n: number,
): Float64Array {
  // two rows of a per pass, inner loop unrolled by four: ~2x over the naive
  // ikj loop, identical accumulation order per output element
  const out = new Float64Array(m * n);
  const n4 = n - (n % 4);
  let i = 0;
  for (; i + 1 < m; i += 2) {
    const a0 = i * k;
    const a1 = (i + 1) * k;
    const o0 = i * n;
    const o1 = (i + 1) * n;
    for (let p = 0; p < k; p++) {
      const av0 = a[a0 + p];
      const av1 = a[a1 + p];
      const bo = p * n;
      let j = 0;
      for (; j < n4; j += 4) {
        const b0 = b[bo + j];
        const b1 = b[bo + j + 1];
        const b2 = b[bo + j + 2];
        const b3 = b[bo + j + 3];
        out[o0 + j] += av0 * b0;
        out[o0 + j + 1] += av0 * b1;
        out[o0 + j + 2] += av0 * b2;
        out[o0 + j + 3] += av0 * b3;
        out[o1 + j] += av1 * b0;
        out[o1 + j + 1] += av1 * b1;
        out[o1 + j + 2] += av1 * b2;
        out[o1 + j + 3] += av1 * b3;
      }
      for (; j < n; j++) {
        out[o0 + j] += av0 * b[bo + j];
        out[o1 + j] += av1 * b[bo + j];
      }
    }
  }
  for (; i < m; i++) {
    const ao = i * k;
    const oo = i * n;
    for (let p = 0; p < k; p++) {
      const av = a[ao + p];
      const bo = p * n;
      for (let j = 0; j < n; j++) out[oo + j] += av * b[bo + j];
    }
  }
  return out;
}

function addBiasInPlace(x: Float64Array, bias: Float64Array, rows: number): void {
  const n = bias.length;
  for (let i = 0; i < rows; i++) {
    const o = i * n;
    for (let j = 0; j < n; j++) x[o + j] += bias[j];
  }
}

function layerNorm(
  x: Float64Array,
  gamma: Float64Array,
  beta: Float64Array,
  rows: number,
): Float64Array {
  const d = gamma.length;
  const out = new Float64Array(rows * d);
  for (let i = 0; i < rows; i++) {
    const o = i * d;
    let mean = 0;
    for (let j = 0; j < d; j++) mean += x[o + j];
    mean /= d;
    let varsum = 0;
    for (let j = 0; j < d; j++) {
      const dv = x[o + j] - mean;
      varsum += dv * dv;
    }
    const inv = 1 / Math.sqrt(varsum / d + 1e-6);
    for (let j = 0; j < d; j++) {
      out[o + j] = (x[o + j] - mean) * inv * gamma[j] + beta[j];
    }
  }
  return out;
}

function geluInPlace(x: Float64Array): void {
  // tanh approximation of GELU
  const c = Math.sqrt(2 / Math.PI);
  for (let i = 0; i < x.length; i++) {
    const v = x[i];
    x[i] = 0.5 * v * (1 + Math.tanh(c * (v + 0.044715 * v * v * v)));
  }
}

function attention(
  x: Float64Array,
  w: BlockWeights,
  tokens: number,
  dim: number,
  heads: number,
): Float64Array {
  const hd = dim / heads;
  const qkv = matmul(x, w.qkvW, tokens, dim, 3 * dim);
  addBiasInPlace(qkv, w.qkvB, tokens);
  const scale = 1 / Math.sqrt(hd);
  const ctx = new Float64Array(tokens * dim);
  const scores = new Float64Array(tokens);
  for (let h = 0; h < heads; h++) {
    const qo = h * hd;
    const ko = dim + h * hd;
    const vo = 2 * dim + h * hd;
    for (let i = 0; i < tokens; i++) {
      let maxv = -Infinity;
      for (let j = 0; j < tokens; j++) {
        let dot = 0;
        const qi = i * 3 * dim + qo;
        const kj = j * 3 * dim + ko;
        for (let c = 0; c < hd; c++) dot += qkv[qi + c] * qkv[kj + c];
        const s = dot * scale;
        scores[j] = s;
        if (s > maxv) maxv = s;
      }
      let z = 0;
      for (let j = 0; j < tokens; j++) {
        const e = Math.exp(scores[j] - maxv);
        scores[j] = e;
        z += e;
      }
      const co = i * dim + h * hd;
      for (let j = 0; j < tokens; j++) {
        const a = scores[j] / z;
        if (a === 0) continue;
        const vj = j * 3 * dim + vo;
        for (let c = 0; c < hd; c++) ctx[co + c] += a * qkv[vj + c];
      }
    }
  }
  const out = matmul(ctx, w.projW, tokens, dim, dim);
  addBiasInPlace(out, w.projB, tokens);
  return out;
}

/** Patch tokens for one image: (gridSide^2) x dim, float32-ready values. */
export function forwardTokens(img: Image, cfg: VitConfig, weights: VitWeights): Float64Array {
  const side = gridSide(cfg);
  const n = side * side;
  const d = cfg.dim;
  const resized = resizeBilinear(img, cfg.inputSize, cfg.inputSize);

  // patchify + normalize: rows are 14x14x3 patches in row-major patch order
  const patchDim = cfg.patch * cfg.patch * 3;
  const patches = new Float64Array(n * patchDim);
  for (let py = 0; py < side; py++) {
    for (let px = 0; px < side; px++) {
      const row = (py * side + px) * patchDim;
      let o = row;
      for (let y = 0; y < cfg.patch; y++) {
        for (let x = 0; x < cfg.patch; x++) {
          const iy = py * cfg.patch + y;
          const ix = px * cfg.patch + x;
          const base = (iy * cfg.inputSize + ix) * 3;
          for (let c = 0; c < 3; c++) {
            patches[o++] = (resized.data[base + c] / 255 - MEAN[c]) / STD[c];
          }
        }
      }
    }
  }

  let tokens = matmul(patches, weights.patchW, n, patchDim, d);
  addBiasInPlace(tokens, weights.patchB, n);

  // prepend class token, add position embeddings
  const seq = new Float64Array((n + 1) * d);
  seq.set(weights.clsToken, 0);
  seq.set(tokens, d);
  for (let i = 0; i < seq.length; i++) seq[i] += weights.posEmbed[i];

  let x = seq;
  const rows = n + 1;
  for (const blk of weights.blocks) {
    const attnOut = attention(layerNorm(x, blk.ln1g, blk.ln1b, rows), blk, rows, d, cfg.heads);
    for (let i = 0; i < x.length; i++) x[i] += attnOut[i];
    const h = matmul(layerNorm(x, blk.ln2g, blk.ln2b, rows), blk.fc1W, rows, d, d * cfg.mlpRatio);
    addBiasInPlace(h, blk.fc1B, rows);
    geluInPlace(h);
    const mlpOut = matmul(h, blk.fc2W, rows, d * cfg.mlpRatio, d);
    addBiasInPlace(mlpOut, blk.fc2B, rows);
    for (let i = 0; i < x.length; i++) x[i] += mlpOut[i];
  }

  // final layer norm and head removed; drop the class token
  return x.slice(d);
}

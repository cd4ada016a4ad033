#!/usr/bin/env node
/** cvmix-extract: manifest + images -> CVFM token features.
 *
 * Usage:
 *   cvmix-extract --manifest M.tsv --images DIR --out DIR
 *       [--model-size base|small] [--input-size 224] [--augment none|train]
 *       [--variants N] [--roll-probability 0.75] [--seed S]
 *       [--weights FILE] [--blocks N]
 *
 * Exit codes: 0 success, 1 usage error, 2 data error.
 */

import { defaultConfig, ExtractorConfig } from "./config.js";
import { extract } from "./extract.js";
import { loadManifest } from "./manifest.js";

function parseArgs(argv: string[]): Map<string, string> {
  const out = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    if (!key.startsWith("--")) throw new Error(`unexpected argument ${key}`);
    const value = argv[i + 1];
    if (value === undefined) throw new Error(`missing value for ${key}`);
    out.set(key.slice(2), value);
  }
  return out;
}

const KNOWN = new Set([
  "manifest", "images", "out", "model-size", "input-size", "augment",
  "variants", "roll-probability", "seed", "weights", "blocks",
]);

export function main(argv: string[]): number {
  let args: Map<string, string>;
  try {
    args = parseArgs(argv);
    for (const key of args.keys()) {
      if (!KNOWN.has(key)) throw new Error(`unknown flag --${key}`);
    }
    for (const required of ["manifest", "images", "out"]) {
      if (!args.has(required)) throw new Error(`--${required} is required`);
    }
  } catch (err) {
    console.error(`usage error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }

  let cfg: ExtractorConfig;
  try {
    cfg = defaultConfig({
      modelSize: (args.get("model-size") ?? "base") as ExtractorConfig["modelSize"],
      inputSize: Number(args.get("input-size") ?? 224),
      augment: (args.get("augment") ?? "none") as ExtractorConfig["augment"],
      variantsPerImage: Number(args.get("variants") ?? 0),
      rollProbability: Number(args.get("roll-probability") ?? 0.75),
      seed: Number(args.get("seed") ?? 0),
      blocks: args.has("blocks") ? Number(args.get("blocks")) : undefined,
      weightsPath: args.get("weights"),
    });
  } catch (err) {
    console.error(`usage error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }

  for (const [key, value] of Object.entries({
    manifest: args.get("manifest"),
    images: args.get("images"),
    out: args.get("out"),
    model_size: cfg.modelSize,
    input_size: cfg.inputSize,
    augment: cfg.augment,
    variants: cfg.variantsPerImage,
    roll_probability: cfg.rollProbability,
    seed: cfg.seed,
    blocks: cfg.blocks ?? "default",
    weights: cfg.weightsPath ?? "random",
  })) {
    console.log(`${key}=${value}`);
  }

  try {
    const manifest = loadManifest(args.get("manifest")!);
    const result = extract(manifest, args.get("images")!, args.get("out")!, cfg,
                           (line) => console.error(line));
    console.log(`written=${result.written} skipped=${result.skipped.length}`);
    return 0;
  } catch (err) {
    console.error(`data error: ${err instanceof Error ? err.message : err}`);
    return 2;
  }
}

import { fileURLToPath } from "node:url";
if (process.argv[1] === fileURLToPath(import.meta.url)) {
  process.exit(main(process.argv.slice(2)));
}

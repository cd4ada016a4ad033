/** Extraction pipeline: manifest records -> images -> (optional paired
 * augmentation) -> ViT patch tokens -> CVFM files next to the output root.
 *
 * Output naming mirrors the engine's feature-source convention: the image
 * reference with a .cvfm extension for the base view, `.augK.cvfm` for the
 * K-th augmented variant. Unreadable images skip the whole record with a log
 * entry; a manifest/output count mismatch is reported in the result.
 */

import { join } from "node:path";

import { augmentPair } from "./augment.js";
import { ExtractorConfig, validateConfig } from "./config.js";
import { writeCvfm } from "./cvfm.js";
import { Image, readPpm } from "./image.js";
import { Manifest, ManifestRecord } from "./manifest.js";
import { deriveRng } from "./rng.js";
import { VitWeights, forwardTokens, gridSide, loadWeights, randomWeights, vitConfig } from "./vit.js";

export interface ExtractResult {
  written: number;
  skipped: { id: number; reason: string }[];
  warnings: string[];
}

function cvfmName(ref: string, variant: number): string {
  const stem = ref.replace(/\.[^./\\]+$/, "");
  return variant === 0 ? `${stem}.cvfm` : `${stem}.aug${variant}.cvfm`;
}

export function extract(
  manifest: Manifest,
  imageRoot: string,
  outDir: string,
  cfg: ExtractorConfig,
  log: (line: string) => void = () => {},
): ExtractResult {
  validateConfig(cfg);
  const vit = vitConfig(cfg.modelSize, cfg.inputSize, cfg.blocks);
  const weights: VitWeights = cfg.weightsPath
    ? loadWeights(cfg.weightsPath, vit)
    : randomWeights(vit, cfg.seed);
  const side = gridSide(vit);
  const result: ExtractResult = { written: 0, skipped: [], warnings: [] };

  const emit = (ref: string, variant: number, img: Image): void => {
    const tokens = forwardTokens(img, vit, weights);
    writeCvfm(join(outDir, cvfmName(ref, variant)), side, side, vit.dim, tokens);
    result.written += 1;
  };

  for (const rec of manifest.records) {
    let ground: Image;
    let satellite: Image;
    try {
      ground = readPpm(join(imageRoot, rec.groundRef));
      satellite = readPpm(join(imageRoot, rec.satRef));
    } catch (err) {
      const reason = err instanceof Error ? err.message : String(err);
      result.skipped.push({ id: rec.id, reason });
      log(`skip record ${rec.id}: ${reason}`);
      continue;
    }
    emit(rec.groundRef, 0, ground);
    emit(rec.satRef, 0, satellite);
    if (cfg.augment === "train") {
      for (let v = 1; v <= cfg.variantsPerImage; v++) {
        const rng = deriveRng(cfg.seed, 0x617567, rec.id, v);
        const aug = augmentPair(ground, satellite, cfg.rollProbability, rng);
        if (aug.warning) {
          result.warnings.push(`record ${rec.id} variant ${v}: ${aug.warning}`);
          log(`warn record ${rec.id} variant ${v}: ${aug.warning}`);
        }
        emit(rec.groundRef, v, aug.ground);
        emit(rec.satRef, v, aug.satellite);
      }
    }
  }
  if (result.skipped.length > 0) {
    log(
      `manifest has ${manifest.records.length} records; ` +
      `${result.skipped.length} skipped, ${result.written} files written`,
    );
  }
  return result;
}

import { MODEL_DIMS, ModelSize } from "./vit.js";

export interface ExtractorConfig {
  modelSize: ModelSize;
  inputSize: number; // pixels, multiple of 14
  augment: "none" | "train";
  rollProbability: number;
  variantsPerImage: number; // augmented copies per record (besides the base)
  seed: number;
  blocks?: number; // transformer depth override (tests); default per model
  weightsPath?: string; // published weights converted to the CVWT format
}

export function validateConfig(cfg: ExtractorConfig): void {
  if (!(cfg.modelSize in MODEL_DIMS)) {
    throw new Error(`unknown model size ${cfg.modelSize}`);
  }
  if (cfg.inputSize % 14 !== 0 || cfg.inputSize < 14) {
    throw new Error(`input size ${cfg.inputSize} must be a positive multiple of 14`);
  }
  if (cfg.augment !== "none" && cfg.augment !== "train") {
    throw new Error(`augment must be none or train, got ${cfg.augment}`);
  }
  if (!(cfg.rollProbability >= 0 && cfg.rollProbability <= 1)) {
    throw new Error(`roll probability ${cfg.rollProbability} outside [0, 1]`);
  }
  if (cfg.variantsPerImage < 0) {
    throw new Error(`variants per image must be >= 0`);
  }
  if (cfg.blocks !== undefined && cfg.blocks < 1) {
    throw new Error(`blocks must be >= 1`);
  }
}

export function defaultConfig(partial: Partial<ExtractorConfig> = {}): ExtractorConfig {
  const cfg: ExtractorConfig = {
    modelSize: "base",
    inputSize: 224,
    augment: "none",
    rollProbability: 0.75,
    variantsPerImage: 0,
    seed: 0,
    ...partial,
  };
  validateConfig(cfg);
  return cfg;
}

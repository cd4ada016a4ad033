/** Deterministic PRNG (mulberry32): identical streams on every platform. */
export class Rng {
  private state: number;

  constructor(seed: number) {
    this.state = seed >>> 0;
  }

  /** Uniform in [0, 1). */
  next(): number {
    this.state = (this.state + 0x6d2b79f5) >>> 0;
    let t = this.state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  }

  uniform(lo: number, hi: number): number {
    return lo + (hi - lo) * this.next();
  }

  int(n: number): number {
    return Math.floor(this.next() * n);
  }

  /** Approximately standard normal (sum of 12 uniforms, mean-centered). */
  normal(): number {
    let s = 0;
    for (let i = 0; i < 12; i++) s += this.next();
    return s - 6;
  }

}

/** Stateless stream derivation: same (seed, tags) always yields the same
 * stream regardless of processing order. */
export function deriveRng(seed: number, ...tags: number[]): Rng {
  let h = seed >>> 0;
  for (const t of tags) {
    h = Math.imul(h ^ ((t + 0x9e3779b9) >>> 0), 0x85ebca6b) >>> 0;
    h = ((h << 13) | (h >>> 19)) >>> 0;
  }
  return new Rng(h === 0 ? 0x1234567 : h);
}

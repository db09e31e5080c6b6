/**
 * Deterministic RNG derived from (seed, string/int tags), so every dropout
 * mask is reproducible across runs and independent of call order.
 */

function fnv1a(text: string): number {
  let hash = 0x811c9dc5
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i)
    hash = Math.imul(hash, 0x01000193)
  }
  return hash >>> 0
}

/** mulberry32: small, fast, good enough for dropout masks and demo noise. */
export function rngFrom(...parts: (string | number)[]): () => number {
  let state = 0x9e3779b9
  for (const part of parts) {
    const word = typeof part === 'number' ? part >>> 0 : fnv1a(part)
    state = (state ^ word) >>> 0
    state = Math.imul(state ^ (state >>> 16), 0x45d9f3b) >>> 0
    state = Math.imul(state ^ (state >>> 16), 0x45d9f3b) >>> 0
    state = (state ^ (state >>> 16)) >>> 0
  }
  return () => {
    state = (state + 0x6d2b79f5) >>> 0
    let t = state
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

/** Standard normal via Box-Muller. */
export function normalFrom(rng: () => number): () => number {
  let spare: number | null = null
  return () => {
    if (spare !== null) {
      const value = spare
      spare = null
      return value
    }
    let u = 0
    while (u === 0) u = rng()
    const v = rng()
    const radius = Math.sqrt(-2 * Math.log(u))
    spare = radius * Math.sin(2 * Math.PI * v)
    return radius * Math.cos(2 * Math.PI * v)
  }
}

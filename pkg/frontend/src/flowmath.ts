/** Client-side recomputation of the running flow score from displayed
 * per-turn similarities — a living consistency check of the API contract.
 * Mirrors the server definition: 2^(−mean log2((s+1)/2)), s clamped just
 * above −1. */

export const SIM_CLAMP = 1e-6;

export function flowScore(similarities: readonly number[]): number {
  if (similarities.length === 0) {
    throw new Error("flow score needs at least one similarity");
  }
  let total = 0;
  for (const raw of similarities) {
    const s = Math.max(raw, -1 + SIM_CLAMP);
    total += Math.log2((s + 1) / 2);
  }
  return Math.pow(2, -total / similarities.length);
}

/** Badge color for a similarity value on the fixed console scale. */
export function skBadge(s: number): "green" | "amber" | "red" {
  if (s >= 0.5) return "green";
  if (s >= 0) return "amber";
  return "red";
}

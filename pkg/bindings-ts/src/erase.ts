/**
 * Point erasure over typed arrays: keep exactly the points whose winning
 * class probability is at least tauS (inclusive). Ties break to the lowest
 * class index; points whose argmax is the ignore class are dropped
 * regardless of confidence. Matches the pipeline's erase operation
 * numerically: probabilities compare as IEEE doubles and coordinates are
 * copied bit-for-bit.
 */

import { ArrayScene, numPoints, validateScene } from "./sceneFormat.js";

export interface EraseResult {
  scene: ArrayScene;
  keptIndex: Int32Array;
  removedFraction: number;
}

export function bindErase(
  scene: ArrayScene,
  probs: Float64Array,
  numClasses: number,
  tauS: number,
  ignoreClass?: number,
): EraseResult {
  validateScene(scene);
  const m = numPoints(scene);
  if (numClasses < 1) {
    throw new Error("numClasses must be positive");
  }
  if (probs.length !== m * numClasses) {
    throw new Error(`probs length ${probs.length} does not match ${m} x ${numClasses}`);
  }

  const kept: number[] = [];
  const labels: number[] = [];
  for (let i = 0; i < m; i++) {
    let best = 0;
    let bestP = probs[i * numClasses];
    for (let c = 1; c < numClasses; c++) {
      const p = probs[i * numClasses + c];
      if (p > bestP) {
        bestP = p;
        best = c;
      }
    }
    if (bestP >= tauS && (ignoreClass === undefined || best !== ignoreClass)) {
      kept.push(i);
      labels.push(best);
    }
  }

  const coords = new Float32Array(3 * kept.length);
  const feats = new Float32Array(kept.length);
  const outLabels = new Uint32Array(kept.length);
  for (let k = 0; k < kept.length; k++) {
    const i = kept[k];
    coords[3 * k] = scene.coords[3 * i];
    coords[3 * k + 1] = scene.coords[3 * i + 1];
    coords[3 * k + 2] = scene.coords[3 * i + 2];
    feats[k] = scene.feats[i];
    outLabels[k] = labels[k];
  }
  return {
    scene: { coords, feats, labels: outLabels },
    keptIndex: Int32Array.from(kept),
    removedFraction: m === 0 ? 0 : (m - kept.length) / m,
  };
}

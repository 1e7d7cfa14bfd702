/**
 * Patch mixing + instance filling through the pipeline's own CLI.
 *
 * The scene crosses the boundary as the binary point format, the pipeline
 * runs `augment` on a single-scene dataset, and the result is read back as
 * typed arrays. Because the same executable does the work, a seed-matched
 * call reproduces the batch CLI output for that scene bit-for-bit: scene k
 * of a batch run with base seed s uses seed (s + k), so pass that value.
 */

import { spawnSync } from "child_process";
import { mkdirSync, mkdtempSync, readFileSync, rmSync, writeFileSync } from "fs";
import { tmpdir } from "os";
import { join } from "path";

import {
  ArrayScene,
  Provenance,
  readProvenance,
  readSceneBin,
  writeSceneBin,
} from "./sceneFormat.js";

export interface MixFillConfig {
  rhoMix?: number;
  pFill?: number;
  contextRadius?: number;
  contextMinPoints?: number;
}

export interface MixFillResult {
  scene: ArrayScene;
  provenance: Provenance;
}

export interface AugmentOptions {
  /** Python executable used to run the pipeline (default: python3 or $SCENEMIX_PYTHON). */
  python?: string;
  /** Keep the temporary exchange directory for debugging. */
  keepTemp?: boolean;
}

interface PoolSchema {
  num_classes: number;
  names: string[];
  thing_class_ids: number[];
  ignore_class_id: number | null;
  raw_label_map?: Record<string, number>;
}

function schemaFromPoolManifest(poolManifestPath: string): PoolSchema {
  const doc = JSON.parse(readFileSync(poolManifestPath, "utf-8"));
  if (doc.kind !== "scenemix-pool-manifest" || doc.schema === undefined) {
    throw new Error(`${poolManifestPath}: not a pool manifest`);
  }
  return doc.schema as PoolSchema;
}

/** Emit the fixed-shape dataset manifest; JSON string literals are valid YAML scalars. */
function datasetYaml(schema: PoolSchema, sceneId: string): string {
  const lines: string[] = [];
  lines.push(`kind: "scenemix-dataset"`);
  lines.push("schema:");
  lines.push(`  num_classes: ${schema.num_classes}`);
  lines.push(`  names: ${JSON.stringify(schema.names)}`);
  lines.push(`  thing_class_ids: ${JSON.stringify(schema.thing_class_ids)}`);
  lines.push(`  ignore_class_id: ${schema.ignore_class_id === null ? "null" : schema.ignore_class_id}`);
  if (schema.raw_label_map !== undefined) {
    lines.push("  raw_label_map:");
    for (const [k, v] of Object.entries(schema.raw_label_map)) {
      lines.push(`    ${k}: ${v}`);
    }
  }
  lines.push("scenes:");
  lines.push(`- id: ${JSON.stringify(sceneId)}`);
  lines.push(`  bin: ${JSON.stringify(`scenes/${sceneId}.bin`)}`);
  lines.push(`  label: ${JSON.stringify(`scenes/${sceneId}.label`)}`);
  return lines.join("\n") + "\n";
}

export function bindMixAndFill(
  scene: ArrayScene,
  poolManifestPath: string,
  seed: number,
  config: MixFillConfig = {},
  options: AugmentOptions = {},
): MixFillResult {
  if (scene.labels === undefined) {
    throw new Error("mixing needs a labeled scene");
  }
  const python = options.python ?? process.env.SCENEMIX_PYTHON ?? "python3";
  const work = mkdtempSync(join(tmpdir(), "scenemix-bind-"));
  try {
    const sceneId = "000000";
    const dataDir = join(work, "data");
    mkdirSync(join(dataDir, "scenes"), { recursive: true });
    writeSceneBin(
      scene,
      join(dataDir, "scenes", `${sceneId}.bin`),
      join(dataDir, "scenes", `${sceneId}.label`),
    );
    const schema = schemaFromPoolManifest(poolManifestPath);
    writeFileSync(join(dataDir, "dataset.yaml"), datasetYaml(schema, sceneId));

    const outDir = join(work, "out");
    const args = [
      "-m",
      "scenemix.cli",
      "augment",
      "--dataset",
      join(dataDir, "dataset.yaml"),
      "--pools",
      poolManifestPath,
      "--out",
      outDir,
      "--seed",
      String(seed),
    ];
    if (config.rhoMix !== undefined) args.push("--set", `rho_mix=${config.rhoMix}`);
    if (config.pFill !== undefined) args.push("--set", `p_fill=${config.pFill}`);
    if (config.contextRadius !== undefined) {
      args.push("--set", `context_radius=${config.contextRadius}`);
    }
    if (config.contextMinPoints !== undefined) {
      args.push("--set", `context_min_points=${config.contextMinPoints}`);
    }
    const proc = spawnSync(python, args, { encoding: "utf-8" });
    if (proc.status !== 0) {
      throw new Error(
        `augment failed (exit ${proc.status}): ${proc.stderr || proc.stdout || proc.error}`,
      );
    }

    const out = readSceneBin(
      join(outDir, "scenes", `${sceneId}.bin`),
      join(outDir, "scenes", `${sceneId}.label`),
    );
    const provenance = readProvenance(
      join(outDir, "scenes", `${sceneId}.prov`),
      join(outDir, "scenes", `${sceneId}.prov.json`),
    );
    return { scene: out, provenance };
  } finally {
    if (!options.keepTemp) {
      rmSync(work, { recursive: true, force: true });
    }
  }
}

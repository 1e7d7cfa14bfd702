/**
 * Binding parity: seed-matched bindMixAndFill calls reproduce the CLI
 * `augment` outputs bit-identically on 50 scenes, within a minute.
 *
 * The CLI augments scene k of a manifest with seed (base + k); the binding
 * is called once per scene with that same seed.
 */

import { spawnSync } from "child_process";
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "fs";
import { tmpdir } from "os";
import { join } from "path";
import { afterAll, beforeAll, describe, expect, test } from "vitest";

import { bindMixAndFill, readProvenance, readSceneBin } from "../src/index.js";

const PYTHON = process.env.SCENEMIX_PYTHON ?? "python3";
const NUM_SCENES = 50;
const BASE_SEED = 100;
const P_FILL = 0.4;

let work: string;

function cli(...args: string[]): void {
  const proc = spawnSync(PYTHON, ["-m", "scenemix.cli", ...args], {
    cwd: work,
    encoding: "utf-8",
  });
  if (proc.status !== 0) {
    throw new Error(`scenemix ${args[0]} failed: ${proc.stderr || proc.stdout}`);
  }
}

function bytesOf(view: ArrayBufferView): Buffer {
  return Buffer.from(view.buffer, view.byteOffset, view.byteLength);
}

beforeAll(() => {
  work = mkdtempSync(join(tmpdir(), "scenemix-parity-"));
  cli(
    "gen-synth", "--out", "data", "--num-scenes", String(NUM_SCENES),
    "--ground-points", "250", "--points-per-instance", "10:25", "--seed", "21",
  );
  cli(
    "gen-synth", "--out", "poolsrc", "--num-scenes", "12",
    "--ground-points", "250", "--points-per-instance", "10:25", "--seed", "900",
  );
  cli("pools", "--dataset", "poolsrc/dataset.yaml", "--out", "pools/pools.json");
  cli(
    "augment", "--dataset", "data/dataset.yaml", "--pools", "pools/pools.json",
    "--out", "aug", "--seed", String(BASE_SEED), "--set", `p_fill=${P_FILL}`,
  );
}, 180_000);

afterAll(() => {
  if (work) rmSync(work, { recursive: true, force: true });
});

describe("binding parity with the CLI augment path", () => {
  test(
    `reproduces ${NUM_SCENES} augmented scenes bit-identically in under a minute`,
    () => {
      const started = Date.now();
      for (let k = 0; k < NUM_SCENES; k++) {
        const id = String(k).padStart(6, "0");
        const input = readSceneBin(
          join(work, "data", "scenes", `${id}.bin`),
          join(work, "data", "scenes", `${id}.label`),
        );
        const result = bindMixAndFill(
          input,
          join(work, "pools", "pools.json"),
          BASE_SEED + k,
          { pFill: P_FILL },
        );

        const expected = readSceneBin(
          join(work, "aug", "scenes", `${id}.bin`),
          join(work, "aug", "scenes", `${id}.label`),
        );
        expect(bytesOf(result.scene.coords).equals(bytesOf(expected.coords))).toBe(true);
        expect(bytesOf(result.scene.feats).equals(bytesOf(expected.feats))).toBe(true);
        expect(bytesOf(result.scene.labels!).equals(bytesOf(expected.labels!))).toBe(true);

        const expectedProv = readProvenance(
          join(work, "aug", "scenes", `${id}.prov`),
          join(work, "aug", "scenes", `${id}.prov.json`),
        );
        expect(bytesOf(result.provenance.branch).equals(bytesOf(expectedProv.branch))).toBe(true);
        expect(bytesOf(result.provenance.source).equals(bytesOf(expectedProv.source))).toBe(true);
        expect(result.provenance.sources).toEqual(expectedProv.sources);
      }
      const elapsed = (Date.now() - started) / 1000;
      expect(elapsed).toBeLessThan(60);
      // eslint-disable-next-line no-console
      console.log(`[ACCEPTANCE] binding parity (${NUM_SCENES} scenes): PASS in ${elapsed.toFixed(1)}s`);
    },
    120_000,
  );

  test("empty pools are the identity", () => {
    // a manifest with no entries: every replaced patch falls back to the
    // base patch and filling has nothing to add
    const id = "000000";
    const input = readSceneBin(
      join(work, "data", "scenes", `${id}.bin`),
      join(work, "data", "scenes", `${id}.label`),
    );
    const emptyManifest = join(work, "pools", "empty.json");
    const base = JSON.parse(
      readFileSync(join(work, "pools", "pools.json"), "utf-8"),
    );
    base.patches = [];
    base.instances = [];
    base.scenes = [];
    writeFileSync(emptyManifest, JSON.stringify(base));
    const result = bindMixAndFill(input, emptyManifest, 7, { pFill: P_FILL });
    expect(bytesOf(result.scene.coords).equals(bytesOf(input.coords))).toBe(true);
    expect(bytesOf(result.scene.feats).equals(bytesOf(input.feats))).toBe(true);
    expect(bytesOf(result.scene.labels!).equals(bytesOf(input.labels!))).toBe(true);
    expect(result.provenance.sources).toEqual([]);
  });
});

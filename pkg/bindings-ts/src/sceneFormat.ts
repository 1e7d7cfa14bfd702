/**
 * Binary scene format shared with the pipeline: 16 bytes per point, four
 * little-endian float32 values (x, y, z, intensity). Label files hold one
 * little-endian uint32 per point; the low 16 bits are the semantic label,
 * the high 16 bits an instance id that is discarded on read and written
 * as zero.
 */

import { readFileSync, writeFileSync } from "fs";

export const POINT_RECORD_BYTES = 16;
export const SEMANTIC_MASK = 0xffff;

/** Row-major point arrays; coords has 3 entries per point, feats one. */
export interface ArrayScene {
  coords: Float32Array;
  feats: Float32Array;
  labels?: Uint32Array;
}

export function numPoints(scene: ArrayScene): number {
  return scene.coords.length / 3;
}

export function validateScene(scene: ArrayScene): void {
  if (scene.coords.length % 3 !== 0) {
    throw new Error(`coords length ${scene.coords.length} is not a multiple of 3`);
  }
  const m = scene.coords.length / 3;
  if (scene.feats.length !== m) {
    throw new Error(`feats length ${scene.feats.length} does not match ${m} points`);
  }
  if (scene.labels !== undefined && scene.labels.length !== m) {
    throw new Error(`labels length ${scene.labels.length} does not match ${m} points`);
  }
}

export function readSceneBin(binPath: string, labelPath?: string): ArrayScene {
  const buf = readFileSync(binPath);
  if (buf.length % POINT_RECORD_BYTES !== 0) {
    throw new Error(
      `${binPath}: size ${buf.length} not divisible by ${POINT_RECORD_BYTES}-byte records`,
    );
  }
  const m = buf.length / POINT_RECORD_BYTES;
  const coords = new Float32Array(3 * m);
  const feats = new Float32Array(m);
  for (let i = 0; i < m; i++) {
    const off = i * POINT_RECORD_BYTES;
    coords[3 * i] = buf.readFloatLE(off);
    coords[3 * i + 1] = buf.readFloatLE(off + 4);
    coords[3 * i + 2] = buf.readFloatLE(off + 8);
    feats[i] = buf.readFloatLE(off + 12);
  }
  let labels: Uint32Array | undefined;
  if (labelPath !== undefined) {
    labels = readLabels(labelPath, m);
  }
  return { coords, feats, labels };
}

export function readLabels(labelPath: string, expectPoints?: number): Uint32Array {
  const buf = readFileSync(labelPath);
  if (buf.length % 4 !== 0) {
    throw new Error(`${labelPath}: size ${buf.length} not divisible by 4-byte records`);
  }
  const m = buf.length / 4;
  if (expectPoints !== undefined && m !== expectPoints) {
    throw new Error(`${labelPath}: ${m} label records for ${expectPoints} points`);
  }
  const labels = new Uint32Array(m);
  for (let i = 0; i < m; i++) {
    labels[i] = buf.readUInt32LE(i * 4) & SEMANTIC_MASK;
  }
  return labels;
}

export function writeSceneBin(scene: ArrayScene, binPath: string, labelPath?: string): void {
  validateScene(scene);
  if ((scene.labels !== undefined) !== (labelPath !== undefined)) {
    throw new Error("labelPath must be given exactly when the scene has labels");
  }
  const m = numPoints(scene);
  const buf = Buffer.alloc(m * POINT_RECORD_BYTES);
  for (let i = 0; i < m; i++) {
    const off = i * POINT_RECORD_BYTES;
    buf.writeFloatLE(scene.coords[3 * i], off);
    buf.writeFloatLE(scene.coords[3 * i + 1], off + 4);
    buf.writeFloatLE(scene.coords[3 * i + 2], off + 8);
    buf.writeFloatLE(scene.feats[i], off + 12);
  }
  writeFileSync(binPath, buf);
  if (labelPath !== undefined && scene.labels !== undefined) {
    const lbuf = Buffer.alloc(m * 4);
    for (let i = 0; i < m; i++) {
      lbuf.writeUInt32LE(scene.labels[i] & SEMANTIC_MASK, i * 4);
    }
    writeFileSync(labelPath, lbuf);
  }
}

/** Per-point provenance: branch 0 = base, 1 = pool patch, 2 = filled instance. */
export interface Provenance {
  branch: Int32Array;
  source: Int32Array;
  sources: string[];
}

export function readProvenance(provPath: string, sourcesPath: string): Provenance {
  const buf = readFileSync(provPath);
  if (buf.length % 8 !== 0) {
    throw new Error(`${provPath}: size ${buf.length} not divisible by 8-byte pairs`);
  }
  const m = buf.length / 8;
  const branch = new Int32Array(m);
  const source = new Int32Array(m);
  for (let i = 0; i < m; i++) {
    branch[i] = buf.readInt32LE(i * 8);
    source[i] = buf.readInt32LE(i * 8 + 4);
  }
  const sources = JSON.parse(readFileSync(sourcesPath, "utf-8")).sources as string[];
  return { branch, source, sources };
}

import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { describe, expect, it } from "vitest";

import { parseNifti } from "../src/nifti";
import { prod, Request } from "../src/protocol";
import { ProbabilityStore, slicePatch } from "../src/probstore";
import { linearIndex, makeNifti } from "./helpers";

const SHAPE: [number, number, number] = [6, 5, 4];

function writeMaps(dir: string, caseId: string, stageId: string): Float32Array[] {
  const n = prod(SHAPE);
  const fg = new Float32Array(n).map((_, i) => (i % 7) / 7);
  const bg = new Float32Array(n).map((_, i) => 1 - fg[i]);
  writeFileSync(join(dir, `${caseId}_${stageId}_0.nii.gz`),
                makeNifti(SHAPE, bg, { gzip: true }));
  writeFileSync(join(dir, `${caseId}_${stageId}_1.nii.gz`),
                makeNifti(SHAPE, fg, { gzip: true }));
  return [bg, fg];
}

describe("slicePatch", () => {
  it("extracts the requested region exactly", () => {
    const maps = [0, 1].map((c) => parseNifti(
      makeNifti(SHAPE, new Float32Array(prod(SHAPE)).map((_, i) => c * 1000 + i))));
    const blobs = slicePatch(maps, [1, 2, 1], [3, 2, 2]);
    for (let k = 0; k < 2; k++) {
      for (let j = 0; j < 2; j++) {
        for (let i = 0; i < 3; i++) {
          const src = linearIndex(SHAPE, 1 + i, 2 + j, 1 + k);
          const dst = i + 3 * (j + 2 * k);
          expect(blobs[0][dst]).toBe(src);
          expect(blobs[1][dst]).toBe(1000 + src);
        }
      }
    }
  });

  it("fills out-of-grid voxels with background one-hot", () => {
    const maps = [0, 1].map(() => parseNifti(makeNifti(SHAPE, new Float32Array(prod(SHAPE)))));
    const blobs = slicePatch(maps, [4, 3, 2], [4, 4, 4]);
    const dst = 3 + 4 * (3 + 4 * 3); // entirely outside the 6x5x4 grid
    expect(blobs[0][dst]).toBe(1);
    expect(blobs[1][dst]).toBe(0);
  });
});

describe("ProbabilityStore", () => {
  it("serves stored maps for the requested patch region", () => {
    const dir = mkdtempSync(join(tmpdir(), "probstore-"));
    const [bg, fg] = writeMaps(dir, "case0", "coarse_i");
    const store = new ProbabilityStore(dir);
    const request: Request = {
      header: { request_id: 1, case_id: "case0", stage_id: "coarse_i",
                shape: [2, 2, 2], origin: [1, 1, 1], dtype: "f32le",
                num_classes: 2, channels: 1 },
      payload: Buffer.alloc(8 * 4),
    };
    const blobs = store.responder()(request);
    for (let k = 0; k < 2; k++) {
      for (let j = 0; j < 2; j++) {
        for (let i = 0; i < 2; i++) {
          const src = linearIndex(SHAPE, 1 + i, 1 + j, 1 + k);
          const dst = i + 2 * (j + 2 * k);
          expect(Math.abs(blobs[0][dst] - bg[src])).toBeLessThan(1e-6);
          expect(Math.abs(blobs[1][dst] - fg[src])).toBeLessThan(1e-6);
        }
      }
    }
  });

  it("raises a clear error for missing maps", () => {
    const dir = mkdtempSync(join(tmpdir(), "probstore-"));
    const store = new ProbabilityStore(dir);
    const request: Request = {
      header: { request_id: 2, case_id: "ghost", stage_id: "coarse_i",
                shape: [1, 1, 1], origin: [0, 0, 0], dtype: "f32le",
                num_classes: 2, channels: 1 },
      payload: Buffer.alloc(4),
    };
    expect(() => store.responder()(request)).toThrow(/missing probability map/);
  });

  it("requires a case id", () => {
    const store = new ProbabilityStore("/nowhere");
    const request: Request = {
      header: { request_id: 3, stage_id: "coarse_i", shape: [1, 1, 1],
                origin: [0, 0, 0], dtype: "f32le", num_classes: 2, channels: 1 },
      payload: Buffer.alloc(4),
    };
    expect(() => store.responder()(request)).toThrow(/case_id/);
  });
});

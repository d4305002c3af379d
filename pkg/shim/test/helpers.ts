// Test fixture builder: a minimal single-file NIfTI-1 byte stream.

import { gzipSync } from "node:zlib";

export function makeNifti(shape: [number, number, number], voxels: Float32Array,
                          options: { gzip?: boolean; slope?: number; inter?: number } = {}): Buffer {
  const count = shape[0] * shape[1] * shape[2];
  if (voxels.length !== count) {
    throw new Error(`voxel count ${voxels.length} != ${count}`);
  }
  const buffer = Buffer.alloc(352 + count * 4);
  const view = new DataView(buffer.buffer, buffer.byteOffset);
  view.setInt32(0, 348, true);
  view.setInt16(40, 3, true);
  view.setInt16(42, shape[0], true);
  view.setInt16(44, shape[1], true);
  view.setInt16(46, shape[2], true);
  view.setInt16(70, 16, true);        // float32
  view.setInt16(72, 32, true);        // bitpix
  view.setFloat32(76, 1, true);       // pixdim[0]
  view.setFloat32(80, 1, true);
  view.setFloat32(84, 1, true);
  view.setFloat32(88, 1, true);
  view.setFloat32(108, 352, true);    // vox_offset
  view.setFloat32(112, options.slope ?? 1, true);
  view.setFloat32(116, options.inter ?? 0, true);
  buffer.write("n+1\0", 344, "latin1");
  for (let i = 0; i < count; i++) {
    view.setFloat32(352 + i * 4, voxels[i], true);
  }
  return options.gzip ? gzipSync(buffer) : buffer;
}

/** x-fastest linear index for [i, j, k] in the given shape. */
export function linearIndex(shape: [number, number, number],
                            i: number, j: number, k: number): number {
  return i + shape[0] * (j + shape[1] * k);
}

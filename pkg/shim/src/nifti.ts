// Minimal NIfTI-1 reader: 3D volumes, common CT datatypes, optional gzip.
// Voxels are returned in their on-disk x-fastest linear order, which is the
// same layout the wire protocol uses for patch blobs.

import { gunzipSync } from "node:zlib";

export interface NiftiVolume {
  shape: [number, number, number];
  spacing: [number, number, number];
  /** x-fastest linear voxel values, slope/intercept applied */
  voxels: Float32Array;
}

const HEADER_SIZE = 348;
const MAGIC_OFFSET = 344;

const DTYPE_READERS: Record<number, (view: DataView, byteOffset: number, little: boolean) => number> = {
  2: (v, o) => v.getUint8(o),
  4: (v, o, le) => v.getInt16(o, le),
  8: (v, o, le) => v.getInt32(o, le),
  16: (v, o, le) => v.getFloat32(o, le),
  64: (v, o, le) => v.getFloat64(o, le),
};

const DTYPE_SIZES: Record<number, number> = { 2: 1, 4: 2, 8: 4, 16: 4, 64: 8 };

export function parseNifti(data: Buffer): NiftiVolume {
  if (data.length >= 2 && data[0] === 0x1f && data[1] === 0x8b) {
    data = gunzipSync(data);
  }
  if (data.length < HEADER_SIZE) {
    throw new Error(`file too short for a NIfTI-1 header (${data.length} bytes)`);
  }
  const magic = data.toString("latin1", MAGIC_OFFSET, MAGIC_OFFSET + 3);
  if (magic !== "n+1" && magic !== "ni1") {
    throw new Error(`bad NIfTI magic ${JSON.stringify(magic)} at offset ${MAGIC_OFFSET}`);
  }
  const view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  let little = true;
  if (view.getInt32(0, true) !== HEADER_SIZE) {
    little = false;
    if (view.getInt32(0, false) !== HEADER_SIZE) {
      throw new Error("sizeof_hdr is not 348 under either byte order");
    }
  }
  const ndim = view.getInt16(40, little);
  if (ndim !== 3) {
    throw new Error(`only 3D volumes supported, got dim[0] = ${ndim}`);
  }
  const shape: [number, number, number] = [
    view.getInt16(42, little), view.getInt16(44, little), view.getInt16(46, little),
  ];
  const spacing: [number, number, number] = [
    view.getFloat32(80, little), view.getFloat32(84, little), view.getFloat32(88, little),
  ];
  const datatype = view.getInt16(70, little);
  const reader = DTYPE_READERS[datatype];
  const itemSize = DTYPE_SIZES[datatype];
  if (!reader || !itemSize) {
    throw new Error(`unsupported NIfTI datatype code ${datatype}`);
  }
  let slope = view.getFloat32(112, little);
  let inter = view.getFloat32(116, little);
  if (slope === 0 || !Number.isFinite(slope)) slope = 1;
  if (!Number.isFinite(inter)) inter = 0;
  let voxOffset = Math.floor(view.getFloat32(108, little));
  if (voxOffset < HEADER_SIZE) voxOffset = magic === "n+1" ? 352 : HEADER_SIZE;

  const count = shape[0] * shape[1] * shape[2];
  if (data.length < voxOffset + count * itemSize) {
    throw new Error(`truncated voxel payload (need ${count * itemSize} bytes)`);
  }
  const voxels = new Float32Array(count);
  const identity = slope === 1 && inter === 0;
  const slope32 = Math.fround(slope);
  const inter32 = Math.fround(inter);
  for (let i = 0; i < count; i++) {
    const raw = reader(view, voxOffset + i * itemSize, little);
    // single-precision at every step, matching float32 array arithmetic
    voxels[i] = identity
      ? Math.fround(raw)
      : Math.fround(Math.fround(Math.fround(raw) * slope32) + inter32);
  }
  return { shape, spacing, voxels };
}

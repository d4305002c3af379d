// Wire protocol framing and the request/response state machine.
//
// Request:  one JSON line {request_id, case_id, stage_id, shape, origin,
//           spacing, dtype: "f32le", num_classes, channels} followed by
//           channels * prod(shape) little-endian float32 values (x-fastest).
// Response: one JSON line {request_id, shape, num_classes, dtype: "f32le"}
//           followed by num_classes concatenated probability blobs, or an
//           error line {request_id, error} with no payload.

export interface RequestHeader {
  request_id: number | string;
  case_id?: string;
  stage_id: string;
  shape: [number, number, number];
  origin?: [number, number, number];
  spacing?: [number, number, number];
  dtype: string;
  num_classes: number;
  channels?: number;
}

export interface Request {
  header: RequestHeader;
  payload: Buffer;
}

export type Responder = (request: Request) => Float32Array[];

const NEWLINE = 0x0a;

export function prod(shape: readonly number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

function validateHeader(raw: unknown): RequestHeader {
  if (typeof raw !== "object" || raw === null) {
    throw new Error("request header is not a JSON object");
  }
  const header = raw as Record<string, unknown>;
  const shape = header.shape;
  if (!Array.isArray(shape) || shape.length !== 3 ||
      !shape.every((v) => Number.isInteger(v) && (v as number) > 0)) {
    throw new Error(`bad shape ${JSON.stringify(shape)}`);
  }
  if (header.dtype !== "f32le") {
    throw new Error(`unsupported dtype ${JSON.stringify(header.dtype)}`);
  }
  const numClasses = header.num_classes;
  if (!Number.isInteger(numClasses) || (numClasses as number) < 1) {
    throw new Error(`bad num_classes ${JSON.stringify(numClasses)}`);
  }
  if (typeof header.stage_id !== "string") {
    throw new Error("missing stage_id");
  }
  return header as unknown as RequestHeader;
}

/** Incremental frame parser over an arbitrary chunk stream. */
export class FrameParser {
  private buffer: Buffer = Buffer.alloc(0);
  private pendingHeader: RequestHeader | null = null;
  private pendingBytes = 0;

  /**
   * Feed one chunk; returns completed items. A parse failure surfaces as
   * {error, requestId} so the caller can respond and keep the stream alive
   * (payload boundaries stay intact because the byte count comes from the
   * header that failed validation only when it was unparseable JSON).
   */
  feed(chunk: Buffer): Array<{ request?: Request; error?: string; requestId?: unknown }> {
    this.buffer = this.buffer.length ? Buffer.concat([this.buffer, chunk]) : chunk;
    const out: Array<{ request?: Request; error?: string; requestId?: unknown }> = [];
    for (;;) {
      if (this.pendingHeader) {
        if (this.buffer.length < this.pendingBytes) break;
        const payload = this.buffer.subarray(0, this.pendingBytes);
        this.buffer = this.buffer.subarray(this.pendingBytes);
        out.push({ request: { header: this.pendingHeader, payload } });
        this.pendingHeader = null;
        this.pendingBytes = 0;
        continue;
      }
      const nl = this.buffer.indexOf(NEWLINE);
      if (nl < 0) break;
      const line = this.buffer.subarray(0, nl).toString("utf-8");
      this.buffer = this.buffer.subarray(nl + 1);
      if (!line.trim()) continue;
      let parsed: unknown;
      try {
        parsed = JSON.parse(line);
      } catch (err) {
        out.push({ error: `unparseable request line: ${(err as Error).message}` });
        continue;
      }
      let header: RequestHeader;
      try {
        header = validateHeader(parsed);
      } catch (err) {
        const requestId = (parsed as Record<string, unknown>)?.request_id;
        out.push({ error: (err as Error).message, requestId });
        continue;
      }
      const channels = header.channels ?? 1;
      this.pendingHeader = header;
      this.pendingBytes = channels * prod(header.shape) * 4;
    }
    return out;
  }
}

export function encodeResponse(requestId: unknown, shape: readonly number[],
                               blobs: Float32Array[]): Buffer {
  const n = prod(shape);
  for (const blob of blobs) {
    if (blob.length !== n) {
      throw new Error(`blob length ${blob.length} != ${n}`);
    }
  }
  const header = JSON.stringify({
    request_id: requestId ?? null,
    shape: [...shape],
    num_classes: blobs.length,
    dtype: "f32le",
  });
  const payload = Buffer.concat(blobs.map((b) =>
    Buffer.from(b.buffer, b.byteOffset, b.byteLength)));
  return Buffer.concat([Buffer.from(header + "\n", "utf-8"), payload]);
}

export function encodeError(requestId: unknown, message: string): Buffer {
  return Buffer.from(JSON.stringify({ request_id: requestId ?? null, error: message }) + "\n",
                     "utf-8");
}

/**
 * Renormalize per-voxel sums to 1 in place, but only where the sum deviates
 * by more than the tolerance: well-formed (e.g. one-hot) maps pass through
 * bit-identically.
 */
export function renormalize(blobs: Float32Array[], tolerance = 1e-6): void {
  const n = blobs[0]?.length ?? 0;
  for (let i = 0; i < n; i++) {
    let sum = 0;
    for (const blob of blobs) sum += blob[i];
    if (Math.abs(sum - 1) > tolerance && sum > 1e-8) {
      for (const blob of blobs) blob[i] = Math.fround(blob[i] / sum);
    }
  }
}

export function handleRequest(request: Request, responder: Responder): Buffer {
  const { header } = request;
  try {
    const blobs = responder(request);
    if (blobs.length !== header.num_classes) {
      throw new Error(`responder produced ${blobs.length} classes, expected ${header.num_classes}`);
    }
    renormalize(blobs);
    return encodeResponse(header.request_id, header.shape, blobs);
  } catch (err) {
    return encodeError(header.request_id, (err as Error).message);
  }
}

// Length-prefixed stdio framing shared by the host and its tests.
//
// Frame = 4-byte little-endian unsigned payload length + payload.
// Payload = one UTF-8 JSON header object, then raw little-endian blobs in
// the order declared by the header's `tensors` list. Supported dtypes are
// "f32" (4 bytes per element) and "u8" (1 byte).

export const PROTOCOL_VERSION = 1;
export const MAX_PAYLOAD = 64 * 1024 * 1024;

const DTYPE_BYTES: Record<string, number> = { f32: 4, u8: 1 };

export interface TensorSpec {
  name: string;
  dtype: "f32" | "u8";
  shape: number[];
}

export interface Header {
  msg: string;
  tensors?: TensorSpec[];
  [key: string]: unknown;
}

export class ProtocolError extends Error {}

/** Index one past the closing brace of the JSON object leading the payload. */
export function jsonObjectEnd(payload: Buffer): number {
  if (payload.length === 0 || payload[0] !== 0x7b) {
    throw new ProtocolError("payload does not start with a JSON object");
  }
  let depth = 0;
  let inString = false;
  let escaped = false;
  for (let i = 0; i < payload.length; i++) {
    const ch = payload[i];
    if (inString) {
      if (escaped) {
        escaped = false;
      } else if (ch === 0x5c) {
        escaped = true;
      } else if (ch === 0x22) {
        inString = false;
      }
      continue;
    }
    if (ch === 0x22) {
      inString = true;
    } else if (ch === 0x7b) {
      depth++;
    } else if (ch === 0x7d) {
      depth--;
      if (depth === 0) return i + 1;
    }
  }
  throw new ProtocolError("unterminated JSON header");
}

function tensorBytes(spec: TensorSpec): number {
  const per = DTYPE_BYTES[spec.dtype];
  if (per === undefined) throw new ProtocolError(`unknown dtype ${spec.dtype}`);
  if (!Array.isArray(spec.shape) ||
      spec.shape.some((d) => !Number.isInteger(d) || d < 0)) {
    throw new ProtocolError(`bad shape ${JSON.stringify(spec.shape)}`);
  }
  const count = spec.shape.reduce((a, b) => a * b, 1);
  const bytes = count * per;
  if (bytes > MAX_PAYLOAD) throw new ProtocolError("tensor exceeds payload cap");
  return bytes;
}

export interface DecodedPayload {
  header: Header;
  blobs: Map<string, Buffer>;
}

/** Parse a payload; throws ProtocolError on any malformed content. */
export function decodePayload(payload: Buffer): DecodedPayload {
  const end = jsonObjectEnd(payload);
  let header: Header;
  try {
    header = JSON.parse(payload.subarray(0, end).toString("utf8"));
  } catch (e) {
    throw new ProtocolError(`invalid JSON header: ${e}`);
  }
  if (typeof header !== "object" || header === null || typeof header.msg !== "string") {
    throw new ProtocolError("header must be an object with a string 'msg'");
  }
  const blobs = new Map<string, Buffer>();
  let offset = end;
  const specs = header.tensors ?? [];
  if (!Array.isArray(specs)) throw new ProtocolError("'tensors' must be a list");
  for (const spec of specs) {
    if (typeof spec !== "object" || spec === null || typeof spec.name !== "string") {
      throw new ProtocolError(`malformed tensor spec ${JSON.stringify(spec)}`);
    }
    const nbytes = tensorBytes(spec);
    if (offset + nbytes > payload.length) {
      throw new ProtocolError(`tensor ${spec.name} overruns the payload`);
    }
    blobs.set(spec.name, payload.subarray(offset, offset + nbytes));
    offset += nbytes;
  }
  if (offset !== payload.length) {
    throw new ProtocolError(`${payload.length - offset} trailing bytes after tensors`);
  }
  return { header, blobs };
}

export function encodePayload(header: Header, blobs: Buffer[] = []): Buffer {
  const text = Buffer.from(JSON.stringify(header), "utf8");
  return Buffer.concat([text, ...blobs]);
}

export function frame(payload: Buffer): Buffer {
  if (payload.length > MAX_PAYLOAD) throw new ProtocolError("payload exceeds cap");
  const prefix = Buffer.alloc(4);
  prefix.writeUInt32LE(payload.length, 0);
  return Buffer.concat([prefix, payload]);
}

export function errorPayload(detail: string): Buffer {
  return encodePayload({ msg: "error", detail });
}

/**
 * Incremental frame splitter. Feed it chunks; it emits complete payloads.
 * A declared length beyond the cap is reported once, then that many bytes
 * are discarded as they arrive so the stream stays in sync.
 */
export class FrameReader {
  private buf: Buffer = Buffer.alloc(0);
  private skip = 0;

  push(chunk: Buffer, onPayload: (p: Buffer) => void, onOversized: (len: number) => void): void {
    this.buf = this.buf.length === 0 ? chunk : Buffer.concat([this.buf, chunk]);
    for (;;) {
      if (this.skip > 0) {
        const n = Math.min(this.skip, this.buf.length);
        this.buf = this.buf.subarray(n);
        this.skip -= n;
        if (this.skip > 0) return;
      }
      if (this.buf.length < 4) return;
      const len = this.buf.readUInt32LE(0);
      if (len > MAX_PAYLOAD) {
        this.buf = this.buf.subarray(4);
        this.skip = len;
        onOversized(len);
        continue;
      }
      if (this.buf.length < 4 + len) return;
      const payload = this.buf.subarray(4, 4 + len);
      this.buf = this.buf.subarray(4 + len);
      onPayload(payload);
    }
  }
}

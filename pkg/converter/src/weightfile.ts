/**
 * Writer (and reader, for verification) of the DTWB binary weight format.
 *
 * Layout: magic "DTWB"; u32 LE format version; u32 LE kind (1 = VGG,
 * 2 = MSOE); u32 LE flags (bit 0: VGG average pooling); u32 LE tensor
 * count; then per tensor: u16 LE name length, UTF-8 name, u8 rank,
 * u32 LE dims, float32 LE row-major payload.
 */

export const MAGIC = 'DTWB';
export const FORMAT_VERSION = 1;
export const KIND_VGG = 1;
export const KIND_MSOE = 2;
export const FLAG_AVG_POOL = 1;

export interface NamedTensor {
  name: string;
  shape: number[];
  data: Float32Array;
}

export class WeightFileError extends Error {}

function product(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function serializeWeightFile(
  kind: number,
  flags: number,
  tensors: NamedTensor[],
): Buffer {
  const chunks: Buffer[] = [];
  const header = Buffer.alloc(4 + 16);
  header.write(MAGIC, 0, 'ascii');
  header.writeUInt32LE(FORMAT_VERSION, 4);
  header.writeUInt32LE(kind, 8);
  header.writeUInt32LE(flags, 12);
  header.writeUInt32LE(tensors.length, 16);
  chunks.push(header);

  for (const t of tensors) {
    if (t.data.length !== product(t.shape)) {
      throw new WeightFileError(
        `tensor ${t.name}: payload length ${t.data.length} != shape product ${product(t.shape)}`,
      );
    }
    const name = Buffer.from(t.name, 'utf8');
    const meta = Buffer.alloc(2 + name.length + 1 + 4 * t.shape.length);
    let off = meta.writeUInt16LE(name.length, 0);
    off += name.copy(meta, off);
    off = meta.writeUInt8(t.shape.length, off);
    for (const dim of t.shape) {
      off = meta.writeUInt32LE(dim, off);
    }
    chunks.push(meta);
    // Float32Array is little-endian on every platform node supports,
    // but go through a DataView to keep the byte order explicit.
    const payload = Buffer.alloc(4 * t.data.length);
    const view = new DataView(payload.buffer, payload.byteOffset);
    for (let i = 0; i < t.data.length; i++) {
      view.setFloat32(4 * i, t.data[i], true);
    }
    chunks.push(payload);
  }
  return Buffer.concat(chunks);
}

export function parseWeightFile(buf: Buffer): {
  kind: number;
  flags: number;
  tensors: NamedTensor[];
} {
  if (buf.length < 20 || buf.toString('ascii', 0, 4) !== MAGIC) {
    throw new WeightFileError('bad magic: not a DTWB weight file');
  }
  const version = buf.readUInt32LE(4);
  if (version !== FORMAT_VERSION) {
    throw new WeightFileError(`unsupported format version ${version}`);
  }
  const kind = buf.readUInt32LE(8);
  const flags = buf.readUInt32LE(12);
  const count = buf.readUInt32LE(16);
  let off = 20;
  const need = (n: number) => {
    if (off + n > buf.length) {
      throw new WeightFileError(`truncated weight file at offset ${off}`);
    }
  };
  const tensors: NamedTensor[] = [];
  for (let i = 0; i < count; i++) {
    need(2);
    const nameLen = buf.readUInt16LE(off);
    off += 2;
    need(nameLen + 1);
    const name = buf.toString('utf8', off, off + nameLen);
    off += nameLen;
    const rank = buf.readUInt8(off);
    off += 1;
    need(4 * rank);
    const shape: number[] = [];
    for (let d = 0; d < rank; d++) {
      shape.push(buf.readUInt32LE(off));
      off += 4;
    }
    const n = product(shape);
    need(4 * n);
    const data = new Float32Array(n);
    const view = new DataView(buf.buffer, buf.byteOffset + off);
    for (let j = 0; j < n; j++) {
      data[j] = view.getFloat32(4 * j, true);
    }
    off += 4 * n;
    tensors.push({ name, shape, data });
  }
  return { kind, flags, tensors };
}

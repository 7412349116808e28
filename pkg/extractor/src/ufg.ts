/** UFG1 feature-grid codec.
 *
 * Layout (little-endian): magic "UFG1"; gh, gw, dim, patch_size as uint32;
 * then gh*gw*dim IEEE-754 float32 values ordered row-major (y, x, channel).
 */

export interface FeatureGrid {
  gh: number;
  gw: number;
  dim: number;
  patchSize: number;
  data: Float32Array; // length gh * gw * dim
}

const MAGIC = "UFG1";
const HEADER_BYTES = 4 + 4 * 4;

/** Reject non-finite values and zero-norm patch vectors before writing. */
export function validateGrid(grid: FeatureGrid): void {
  const { gh, gw, dim, data } = grid;
  if (data.length !== gh * gw * dim) {
    throw new Error(`payload length ${data.length} does not match ${gh}x${gw}x${dim}`);
  }
  for (let p = 0; p < gh * gw; p++) {
    let norm = 0;
    for (let c = 0; c < dim; c++) {
      const v = data[p * dim + c];
      if (!Number.isFinite(v)) {
        throw new Error(`non-finite feature at patch (y=${Math.floor(p / gw)}, x=${p % gw})`);
      }
      norm += v * v;
    }
    if (norm === 0) {
      throw new Error(`zero-norm feature at patch (y=${Math.floor(p / gw)}, x=${p % gw})`);
    }
  }
}

export function encodeUfg(grid: FeatureGrid): Buffer {
  validateGrid(grid);
  const buf = Buffer.alloc(HEADER_BYTES + grid.data.length * 4);
  buf.write(MAGIC, 0, "ascii");
  buf.writeUInt32LE(grid.gh, 4);
  buf.writeUInt32LE(grid.gw, 8);
  buf.writeUInt32LE(grid.dim, 12);
  buf.writeUInt32LE(grid.patchSize, 16);
  for (let i = 0; i < grid.data.length; i++) {
    buf.writeFloatLE(grid.data[i], HEADER_BYTES + i * 4);
  }
  return buf;
}

export function decodeUfg(buf: Buffer): FeatureGrid {
  if (buf.length < 4 || buf.toString("ascii", 0, 4) !== MAGIC) {
    throw new Error(`bad magic: expected ${MAGIC}`);
  }
  if (buf.length < HEADER_BYTES) throw new Error("truncated header");
  const gh = buf.readUInt32LE(4);
  const gw = buf.readUInt32LE(8);
  const dim = buf.readUInt32LE(12);
  const patchSize = buf.readUInt32LE(16);
  const expected = gh * gw * dim * 4;
  const got = buf.length - HEADER_BYTES;
  if (got < expected) throw new Error(`truncated payload: expected ${expected} bytes, got ${got}`);
  if (got > expected) throw new Error(`oversized payload: expected ${expected} bytes, got ${got}`);
  const data = new Float32Array(gh * gw * dim);
  for (let i = 0; i < data.length; i++) data[i] = buf.readFloatLE(HEADER_BYTES + i * 4);
  const grid = { gh, gw, dim, patchSize, data };
  validateGrid(grid);
  return grid;
}

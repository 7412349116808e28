/** A small deterministic ViT whose attention projections we export.
 *
 * Weights are drawn from a seeded PRNG so extraction is reproducible
 * offline; load-bearing structure (patchify, pre-norm transformer blocks,
 * per-block q/k/v projections) matches the usual ViT layout. The export
 * taps the chosen block's pre-attention layernorm output through its
 * key/query/value projection, i.e. the per-patch "key features" of that
 * attention layer. With the default single-block model the export needs no
 * attention matrix at all, which keeps 128x128-patch frames tractable.
 */

import { RasterImage } from "./image.js";
import { SeededRng } from "./rng.js";

export type Projection = "key" | "query" | "value";

export interface VitConfig {
  dim: number;
  depth: number;
  heads: number;
  patchSize: number;
  seed: number;
}

export const DEFAULT_MODEL = "seeded-vit";

/** Parse names like "seeded-vit", "seeded-vit-64x2", "seeded-vit-64x2-h8-s7". */
export function parseModelName(name: string): VitConfig {
  const config: VitConfig = { dim: 32, depth: 1, heads: 4, patchSize: 8, seed: 42 };
  if (name === DEFAULT_MODEL) return config;
  const rest = name.startsWith(`${DEFAULT_MODEL}-`) ? name.slice(DEFAULT_MODEL.length + 1) : null;
  if (rest === null) throw new Error(`unknown model ${name}; expected "${DEFAULT_MODEL}[-DIMxDEPTH][-hHEADS][-sSEED]"`);
  for (const part of rest.split("-")) {
    let m;
    if ((m = /^(\d+)x(\d+)$/.exec(part))) {
      config.dim = parseInt(m[1], 10);
      config.depth = parseInt(m[2], 10);
    } else if ((m = /^h(\d+)$/.exec(part))) {
      config.heads = parseInt(m[1], 10);
    } else if ((m = /^s(\d+)$/.exec(part))) {
      config.seed = parseInt(m[1], 10);
    } else {
      throw new Error(`unknown model name component "${part}" in ${name}`);
    }
  }
  if (config.dim < 1 || config.depth < 1 || config.heads < 1 || config.dim % config.heads !== 0) {
    throw new Error(`invalid model config ${JSON.stringify(config)}: dim must be a positive multiple of heads`);
  }
  return config;
}

interface Linear {
  w: Float64Array; // [din][dout] row-major
  b: Float64Array;
  din: number;
  dout: number;
}

interface Block {
  ln1g: Float64Array;
  ln1b: Float64Array;
  q: Linear;
  k: Linear;
  v: Linear;
  o: Linear;
  ln2g: Float64Array;
  ln2b: Float64Array;
  mlpIn: Linear;
  mlpOut: Linear;
}

export class Vit {
  readonly config: VitConfig;
  private embed: Linear;
  private blocks: Block[];

  constructor(config: VitConfig) {
    this.config = config;
    const rng = new SeededRng(config.seed);
    const { dim, depth, patchSize } = config;
    this.embed = makeLinear(rng, 3 * patchSize * patchSize, dim);
    this.blocks = [];
    for (let i = 0; i < depth; i++) {
      this.blocks.push({
        ln1g: ones(dim),
        ln1b: zeros(dim),
        q: makeLinear(rng, dim, dim),
        k: makeLinear(rng, dim, dim),
        v: makeLinear(rng, dim, dim),
        o: makeLinear(rng, dim, dim),
        ln2g: ones(dim),
        ln2b: zeros(dim),
        mlpIn: makeLinear(rng, dim, 4 * dim),
        mlpOut: makeLinear(rng, 4 * dim, dim),
      });
    }
  }

  /** Per-patch projection features for an image whose side is a multiple of the patch size.
   *
   * Returns (gh * gw) x dim features in row-major patch order.
   */
  extractFeatures(img: RasterImage, layer?: number, projection: Projection = "key"): {
    gh: number;
    gw: number;
    features: Float64Array;
  } {
    const { patchSize, dim, depth } = this.config;
    if (img.width % patchSize !== 0 || img.height % patchSize !== 0) {
      throw new Error(`image ${img.width}x${img.height} is not a multiple of patch size ${patchSize}`);
    }
    const exportLayer = layer ?? depth - 1;
    if (exportLayer < 0 || exportLayer >= depth) {
      throw new Error(`layer ${exportLayer} out of range for depth-${depth} model`);
    }
    const gh = img.height / patchSize;
    const gw = img.width / patchSize;
    const n = gh * gw;

    let x = this.patchify(img, gh, gw);
    addPositionalEmbedding(x, gh, gw, dim);

    for (let b = 0; b < exportLayer; b++) {
      x = this.runBlock(x, n, this.blocks[b]);
    }
    const block = this.blocks[exportLayer];
    const normed = layerNorm(x, n, dim, block.ln1g, block.ln1b);
    const proj = projection === "key" ? block.k : projection === "query" ? block.q : block.v;
    return { gh, gw, features: applyLinear(normed, n, proj) };
  }

  private patchify(img: RasterImage, gh: number, gw: number): Float64Array {
    const ps = this.config.patchSize;
    const din = 3 * ps * ps;
    const tokens = new Float64Array(gh * gw * din);
    for (let py = 0; py < gh; py++) {
      for (let px = 0; px < gw; px++) {
        const base = (py * gw + px) * din;
        let k = 0;
        for (let dy = 0; dy < ps; dy++) {
          for (let dx = 0; dx < ps; dx++) {
            const src = ((py * ps + dy) * img.width + px * ps + dx) * 3;
            tokens[base + k++] = (img.data[src] - 0.5) / 0.5;
            tokens[base + k++] = (img.data[src + 1] - 0.5) / 0.5;
            tokens[base + k++] = (img.data[src + 2] - 0.5) / 0.5;
          }
        }
      }
    }
    return applyLinear(tokens, gh * gw, this.embed);
  }

  private runBlock(x: Float64Array, n: number, block: Block): Float64Array {
    const { dim, heads } = this.config;
    const normed = layerNorm(x, n, dim, block.ln1g, block.ln1b);
    const q = applyLinear(normed, n, block.q);
    const k = applyLinear(normed, n, block.k);
    const v = applyLinear(normed, n, block.v);
    const attnOut = streamingAttention(q, k, v, n, dim, heads);
    const afterAttn = new Float64Array(n * dim);
    const projected = applyLinear(attnOut, n, block.o);
    for (let i = 0; i < n * dim; i++) afterAttn[i] = x[i] + projected[i];

    const normed2 = layerNorm(afterAttn, n, dim, block.ln2g, block.ln2b);
    const hidden = applyLinear(normed2, n, block.mlpIn);
    for (let i = 0; i < hidden.length; i++) hidden[i] = gelu(hidden[i]);
    const mlpOut = applyLinear(hidden, n, block.mlpOut);
    for (let i = 0; i < n * dim; i++) afterAttn[i] += mlpOut[i];
    return afterAttn;
  }
}

function zeros(n: number): Float64Array {
  return new Float64Array(n);
}

function ones(n: number): Float64Array {
  return new Float64Array(n).fill(1);
}

function makeLinear(rng: SeededRng, din: number, dout: number): Linear {
  const w = new Float64Array(din * dout);
  const scale = Math.sqrt(2 / (din + dout));
  for (let i = 0; i < w.length; i++) w[i] = rng.gaussian() * scale;
  return { w, b: zeros(dout), din, dout };
}

function applyLinear(x: Float64Array, n: number, lin: Linear): Float64Array {
  const out = new Float64Array(n * lin.dout);
  for (let i = 0; i < n; i++) {
    const xBase = i * lin.din;
    const oBase = i * lin.dout;
    for (let j = 0; j < lin.dout; j++) out[oBase + j] = lin.b[j];
    for (let a = 0; a < lin.din; a++) {
      const xv = x[xBase + a];
      if (xv === 0) continue;
      const wBase = a * lin.dout;
      for (let j = 0; j < lin.dout; j++) out[oBase + j] += xv * lin.w[wBase + j];
    }
  }
  return out;
}

function layerNorm(x: Float64Array, n: number, dim: number, g: Float64Array, b: Float64Array): Float64Array {
  const out = new Float64Array(n * dim);
  for (let i = 0; i < n; i++) {
    const base = i * dim;
    let mean = 0;
    for (let j = 0; j < dim; j++) mean += x[base + j];
    mean /= dim;
    let varsum = 0;
    for (let j = 0; j < dim; j++) {
      const d = x[base + j] - mean;
      varsum += d * d;
    }
    const inv = 1 / Math.sqrt(varsum / dim + 1e-6);
    for (let j = 0; j < dim; j++) out[base + j] = (x[base + j] - mean) * inv * g[j] + b[j];
  }
  return out;
}

function gelu(x: number): number {
  return 0.5 * x * (1 + Math.tanh(Math.sqrt(2 / Math.PI) * (x + 0.044715 * x * x * x)));
}

/** Fixed 2-d sinusoidal position embedding (no learned weights). */
function addPositionalEmbedding(x: Float64Array, gh: number, gw: number, dim: number): void {
  const half = Math.floor(dim / 2);
  for (let py = 0; py < gh; py++) {
    for (let px = 0; px < gw; px++) {
      const base = (py * gw + px) * dim;
      for (let j = 0; j < dim; j++) {
        const inHalf = j < half;
        const pos = inHalf ? py : px;
        const k = inHalf ? j : j - half;
        const span = inHalf ? half : dim - half;
        const freq = Math.pow(10000, -2 * Math.floor(k / 2) / Math.max(span, 1));
        x[base + j] += k % 2 === 0 ? Math.sin(pos * freq) : Math.cos(pos * freq);
      }
    }
  }
}

/** Softmax attention with O(n) memory: two passes per query row. */
function streamingAttention(
  q: Float64Array,
  k: Float64Array,
  v: Float64Array,
  n: number,
  dim: number,
  heads: number,
): Float64Array {
  const hd = dim / heads;
  const scale = 1 / Math.sqrt(hd);
  const out = new Float64Array(n * dim);
  for (let h = 0; h < heads; h++) {
    const off = h * hd;
    for (let i = 0; i < n; i++) {
      const qBase = i * dim + off;
      let maxScore = -Infinity;
      for (let j = 0; j < n; j++) {
        const kBase = j * dim + off;
        let s = 0;
        for (let a = 0; a < hd; a++) s += q[qBase + a] * k[kBase + a];
        if (s * scale > maxScore) maxScore = s * scale;
      }
      let denom = 0;
      const acc = new Float64Array(hd);
      for (let j = 0; j < n; j++) {
        const kBase = j * dim + off;
        let s = 0;
        for (let a = 0; a < hd; a++) s += q[qBase + a] * k[kBase + a];
        const w = Math.exp(s * scale - maxScore);
        denom += w;
        const vBase = j * dim + off;
        for (let a = 0; a < hd; a++) acc[a] += w * v[vBase + a];
      }
      const oBase = i * dim + off;
      for (let a = 0; a < hd; a++) out[oBase + a] = acc[a] / denom;
    }
  }
  return out;
}

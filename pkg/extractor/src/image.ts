/** Image loading (PNG, PPM/PGM) and bilinear geometry on RGB rasters. */

import { readFileSync } from "node:fs";
import { extname } from "node:path";
import pngjs from "pngjs";

const { PNG } = pngjs;

export interface RasterImage {
  width: number;
  height: number;
  /** RGB interleaved, values in [0, 1], length = width * height * 3. */
  data: Float64Array;
}

export function loadImage(path: string): RasterImage {
  const bytes = readFileSync(path);
  const ext = extname(path).toLowerCase();
  if (ext === ".png") return decodePng(bytes);
  if (ext === ".ppm" || ext === ".pgm") return decodePnm(bytes);
  // Fall back on magic sniffing for unlabeled files.
  if (bytes.length >= 8 && bytes[0] === 0x89 && bytes[1] === 0x50) return decodePng(bytes);
  if (bytes.length >= 2 && bytes[0] === 0x50 && (bytes[1] === 0x35 || bytes[1] === 0x36)) {
    return decodePnm(bytes);
  }
  throw new Error(`unsupported image format: ${path}`);
}

function decodePng(bytes: Buffer): RasterImage {
  const png = PNG.sync.read(bytes);
  const data = new Float64Array(png.width * png.height * 3);
  for (let i = 0; i < png.width * png.height; i++) {
    data[i * 3] = png.data[i * 4] / 255;
    data[i * 3 + 1] = png.data[i * 4 + 1] / 255;
    data[i * 3 + 2] = png.data[i * 4 + 2] / 255;
  }
  return { width: png.width, height: png.height, data };
}

/** Binary PPM (P6) and PGM (P5) with maxval <= 255. */
function decodePnm(bytes: Buffer): RasterImage {
  let pos = 0;
  const token = (): string => {
    while (pos < bytes.length) {
      const c = bytes[pos];
      if (c === 0x23) {
        while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      } else if (c === 0x20 || c === 0x09 || c === 0x0a || c === 0x0d) {
        pos++;
      } else {
        break;
      }
    }
    const start = pos;
    while (pos < bytes.length && !/\s/.test(String.fromCharCode(bytes[pos]))) pos++;
    return bytes.toString("ascii", start, pos);
  };
  const magic = token();
  if (magic !== "P5" && magic !== "P6") throw new Error(`not a binary PNM file (${magic})`);
  const width = parseInt(token(), 10);
  const height = parseInt(token(), 10);
  const maxval = parseInt(token(), 10);
  if (!(width > 0 && height > 0)) throw new Error("invalid PNM dimensions");
  if (!(maxval > 0 && maxval <= 255)) throw new Error(`unsupported PNM maxval ${maxval}`);
  pos++; // single whitespace after maxval
  const channels = magic === "P6" ? 3 : 1;
  const needed = width * height * channels;
  if (bytes.length - pos < needed) throw new Error("truncated PNM payload");
  const data = new Float64Array(width * height * 3);
  for (let i = 0; i < width * height; i++) {
    if (channels === 3) {
      data[i * 3] = bytes[pos + i * 3] / maxval;
      data[i * 3 + 1] = bytes[pos + i * 3 + 1] / maxval;
      data[i * 3 + 2] = bytes[pos + i * 3 + 2] / maxval;
    } else {
      const v = bytes[pos + i] / maxval;
      data[i * 3] = data[i * 3 + 1] = data[i * 3 + 2] = v;
    }
  }
  return { width, height, data };
}

/** Bilinear resample; pixel centers map via (i + 0.5) * src / dst - 0.5. */
export function bilinearResize(img: RasterImage, width: number, height: number): RasterImage {
  if (width === img.width && height === img.height) {
    return { width, height, data: img.data.slice() };
  }
  const out = new Float64Array(width * height * 3);
  for (let y = 0; y < height; y++) {
    const sy = Math.min(Math.max(((y + 0.5) * img.height) / height - 0.5, 0), img.height - 1);
    const y0 = Math.floor(sy);
    const y1 = Math.min(y0 + 1, img.height - 1);
    const fy = sy - y0;
    for (let x = 0; x < width; x++) {
      const sx = Math.min(Math.max(((x + 0.5) * img.width) / width - 0.5, 0), img.width - 1);
      const x0 = Math.floor(sx);
      const x1 = Math.min(x0 + 1, img.width - 1);
      const fx = sx - x0;
      for (let c = 0; c < 3; c++) {
        const v00 = img.data[(y0 * img.width + x0) * 3 + c];
        const v01 = img.data[(y0 * img.width + x1) * 3 + c];
        const v10 = img.data[(y1 * img.width + x0) * 3 + c];
        const v11 = img.data[(y1 * img.width + x1) * 3 + c];
        out[(y * width + x) * 3 + c] =
          v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx + v10 * fy * (1 - fx) + v11 * fy * fx;
      }
    }
  }
  return { width, height, data: out };
}

export function cropImage(
  img: RasterImage,
  x1: number,
  y1: number,
  x2: number,
  y2: number,
): RasterImage {
  if (!(0 <= x1 && x1 < x2 && x2 <= img.width && 0 <= y1 && y1 < y2 && y2 <= img.height)) {
    throw new Error(`bbox (${x1},${y1},${x2},${y2}) out of bounds for ${img.width}x${img.height}`);
  }
  const width = x2 - x1;
  const height = y2 - y1;
  const data = new Float64Array(width * height * 3);
  for (let y = 0; y < height; y++) {
    const src = ((y + y1) * img.width + x1) * 3;
    data.set(img.data.subarray(src, src + width * 3), y * width * 3);
  }
  return { width, height, data };
}

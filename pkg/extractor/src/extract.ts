/** Extraction jobs: image -> UFG1 feature grids for the whole frame and crops.
 *
 * The image is resized to the square working frame (default 1024). The
 * whole-frame grid is written as <stem>.ufg; when a crops annotation file is
 * given, every mask's bounding box is cut from the working frame, resized to
 * 256x256, and written as <stem>_<maskid>.ufg. All geometry is bilinear and
 * every output is float32, so repeated runs are byte-identical.
 */

import { mkdirSync, writeFileSync } from "node:fs";
import { basename, extname, join } from "node:path";

import { readAnnotationSet, rleBBox, scaleBBox } from "./annotations.js";
import { bilinearResize, cropImage, loadImage, RasterImage } from "./image.js";
import { encodeUfg } from "./ufg.js";
import { DEFAULT_MODEL, parseModelName, Projection, Vit } from "./vit.js";

export const CROP_SIDE = 256;

export interface ExtractionJob {
  imagePath: string;
  cropsPath?: string;
  outDir: string;
  model?: string;
  side?: number;
  layer?: number;
  projection?: Projection;
}

export interface ExtractionResult {
  written: string[];
  errors: { input: string; message: string }[];
}

function sanitizeId(id: string | number): string {
  return String(id).replace(/[^A-Za-z0-9._-]/g, "-");
}

function runModel(vit: Vit, frame: RasterImage, job: ExtractionJob) {
  const { gh, gw, features } = vit.extractFeatures(frame, job.layer, job.projection ?? "key");
  return {
    gh,
    gw,
    dim: vit.config.dim,
    patchSize: vit.config.patchSize,
    data: Float32Array.from(features),
  };
}

export function extract(job: ExtractionJob): ExtractionResult {
  const result: ExtractionResult = { written: [], errors: [] };
  const side = job.side ?? 1024;
  const vit = new Vit(parseModelName(job.model ?? DEFAULT_MODEL));
  if (side % vit.config.patchSize !== 0) {
    throw new Error(`side ${side} is not a multiple of patch size ${vit.config.patchSize}`);
  }
  mkdirSync(job.outDir, { recursive: true });

  const stem = basename(job.imagePath, extname(job.imagePath));
  let frame: RasterImage;
  try {
    frame = bilinearResize(loadImage(job.imagePath), side, side);
  } catch (err) {
    result.errors.push({ input: job.imagePath, message: String(err instanceof Error ? err.message : err) });
    return result;
  }

  const wholePath = join(job.outDir, `${stem}.ufg`);
  writeFileSync(wholePath, encodeUfg(runModel(vit, frame, job)));
  result.written.push(wholePath);

  if (!job.cropsPath) return result;
  let annotations;
  try {
    annotations = readAnnotationSet(job.cropsPath);
  } catch (err) {
    result.errors.push({ input: job.cropsPath, message: String(err instanceof Error ? err.message : err) });
    return result;
  }
  for (const mask of annotations.masks) {
    const label = `${job.cropsPath}#${mask.id}`;
    try {
      const box = rleBBox(mask.rle, annotations.height, annotations.width);
      if (box === null) throw new Error("mask is empty");
      const scaled = scaleBBox(box, annotations, { height: side, width: side });
      const crop = cropImage(frame, scaled.x1, scaled.y1, scaled.x2, scaled.y2);
      const local = bilinearResize(crop, CROP_SIDE, CROP_SIDE);
      const path = join(job.outDir, `${stem}_${sanitizeId(mask.id)}.ufg`);
      writeFileSync(path, encodeUfg(runModel(vit, local, job)));
      result.written.push(path);
    } catch (err) {
      result.errors.push({ input: label, message: String(err instanceof Error ? err.message : err) });
    }
  }
  return result;
}

/** Annotation-set reading and RLE mask bounding boxes.
 *
 * Masks use column-major run counts alternating background/foreground,
 * starting with background; counts sum to height * width.
 */

import { readFileSync } from "node:fs";

export interface MaskEntry {
  id: string | number;
  rle: number[];
}

export interface AnnotationSet {
  imageId: string | number;
  height: number;
  width: number;
  masks: MaskEntry[];
}

export interface BBox {
  x1: number;
  y1: number;
  x2: number;
  y2: number;
}

export function readAnnotationSet(path: string): AnnotationSet {
  const doc = JSON.parse(readFileSync(path, "utf-8"));
  for (const key of ["image_id", "height", "width", "masks"]) {
    if (!(key in doc)) throw new Error(`annotation file ${path} is missing "${key}"`);
  }
  const masks: MaskEntry[] = doc.masks.map((m: any, i: number) => {
    if (!Array.isArray(m.rle) || m.id === undefined) {
      throw new Error(`mask ${i} in ${path} needs "id" and "rle"`);
    }
    return { id: m.id, rle: m.rle.map((c: any) => Number(c)) };
  });
  return { imageId: doc.image_id, height: doc.height, width: doc.width, masks };
}

/** Half-open bbox of the foreground without materializing the bitmap. */
export function rleBBox(rle: number[], height: number, width: number): BBox | null {
  let pos = 0;
  let minX = Infinity;
  let maxX = -Infinity;
  let minY = Infinity;
  let maxY = -Infinity;
  for (let i = 0; i < rle.length; i++) {
    const len = rle[i];
    if (i % 2 === 1 && len > 0) {
      const xs = Math.floor(pos / height);
      const xe = Math.floor((pos + len - 1) / height);
      minX = Math.min(minX, xs);
      maxX = Math.max(maxX, xe);
      if (xe > xs) {
        // The run wraps across columns, covering a suffix and a prefix.
        minY = 0;
        maxY = height - 1;
      } else {
        minY = Math.min(minY, pos % height);
        maxY = Math.max(maxY, (pos + len - 1) % height);
      }
    }
    pos += len;
  }
  if (pos !== height * width) {
    throw new Error(`RLE counts sum to ${pos}, expected ${height * width}`);
  }
  if (!Number.isFinite(minX)) return null; // empty mask
  return { x1: minX, y1: minY, x2: maxX + 1, y2: maxY + 1 };
}

/** Map a bbox from the annotation frame into a (possibly resized) frame. */
export function scaleBBox(box: BBox, from: { height: number; width: number }, to: { height: number; width: number }): BBox {
  const sx = to.width / from.width;
  const sy = to.height / from.height;
  const x1 = Math.floor(box.x1 * sx);
  const y1 = Math.floor(box.y1 * sy);
  const x2 = Math.min(Math.max(Math.ceil(box.x2 * sx), x1 + 1), to.width);
  const y2 = Math.min(Math.max(Math.ceil(box.y2 * sy), y1 + 1), to.height);
  return { x1, y1, x2, y2 };
}

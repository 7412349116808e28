#!/usr/bin/env node
/** CLI: extract UFG1 feature grids from images (and per-mask crops). */

import { parseArgs } from "node:util";

import { extract, ExtractionResult } from "./extract.js";
import { DEFAULT_MODEL, Projection } from "./vit.js";

const USAGE = `usage: extract-features --images a.png[,b.png...] --out DIR
                        [--crops annotations.json] [--model ${DEFAULT_MODEL}]
                        [--side 1024|256] [--layer N] [--projection key|query|value]

Writes <image>.ufg for each image and <image>_<maskid>.ufg for each mask in
the crops annotation file (bbox cut from the resized frame, resampled to
256x256 before extraction).`;

export function main(argv: string[]): number {
  let args;
  try {
    args = parseArgs({
      args: argv,
      options: {
        images: { type: "string", multiple: true },
        crops: { type: "string" },
        out: { type: "string" },
        model: { type: "string", default: DEFAULT_MODEL },
        side: { type: "string", default: "1024" },
        layer: { type: "string" },
        projection: { type: "string", default: "key" },
        help: { type: "boolean", default: false },
      },
    });
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    console.error(USAGE);
    return 2;
  }
  if (args.values.help) {
    console.log(USAGE);
    return 0;
  }
  const images = (args.values.images ?? []).flatMap((v) => v.split(",")).filter(Boolean);
  if (!images.length || !args.values.out) {
    console.error("error: --images and --out are required");
    console.error(USAGE);
    return 2;
  }
  const side = parseInt(args.values.side!, 10);
  if (side !== 1024 && side !== 256) {
    console.error(`error: --side must be 1024 or 256, got ${args.values.side}`);
    return 2;
  }
  const projection = args.values.projection as Projection;
  if (!["key", "query", "value"].includes(projection)) {
    console.error(`error: --projection must be key, query, or value`);
    return 2;
  }

  let failures = 0;
  for (const imagePath of images) {
    let result: ExtractionResult;
    try {
      result = extract({
        imagePath,
        cropsPath: args.values.crops,
        outDir: args.values.out!,
        model: args.values.model,
        side,
        layer: args.values.layer === undefined ? undefined : parseInt(args.values.layer, 10),
        projection,
      });
    } catch (err) {
      console.error(`error: ${imagePath}: ${err instanceof Error ? err.message : err}`);
      failures++;
      continue;
    }
    for (const path of result.written) console.log(`wrote ${path}`);
    for (const e of result.errors) {
      console.error(`error: ${e.input}: ${e.message}`);
      failures++;
    }
  }
  return failures ? 1 : 0;
}

process.exitCode = main(process.argv.slice(2));

/**
 * Reader for tfjs-style weight archives: a JSON manifest listing weight
 * groups, each with binary shard paths and per-tensor name/shape/dtype
 * entries packed back to back in the shards.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';
import { z } from 'zod';

import { NamedTensor } from './weightfile.js';

const weightEntry = z.object({
  name: z.string(),
  shape: z.array(z.number().int().positive()),
  dtype: z.literal('float32'),
});

const weightGroup = z.object({
  paths: z.array(z.string()).nonempty(),
  weights: z.array(weightEntry),
});

export const sourceManifestSchema = z.array(weightGroup);

export class SourceError extends Error {}

/** Read every tensor of a tfjs-style archive into memory by name. */
export function readSourceArchive(manifestPath: string): Map<string, NamedTensor> {
  let parsedJson: unknown;
  try {
    parsedJson = JSON.parse(fs.readFileSync(manifestPath, 'utf8'));
  } catch (err) {
    throw new SourceError(`cannot read source manifest ${manifestPath}: ${err}`);
  }
  const parsed = sourceManifestSchema.safeParse(parsedJson);
  if (!parsed.success) {
    throw new SourceError(`invalid source manifest: ${parsed.error.message}`);
  }
  const dir = path.dirname(manifestPath);
  const tensors = new Map<string, NamedTensor>();
  for (const group of parsed.data) {
    const shards = group.paths.map((p) => {
      const shardPath = path.join(dir, p);
      if (!fs.existsSync(shardPath)) {
        throw new SourceError(`missing weight shard ${shardPath}`);
      }
      return fs.readFileSync(shardPath);
    });
    const blob = Buffer.concat(shards);
    let off = 0;
    for (const w of group.weights) {
      const n = w.shape.reduce((a, b) => a * b, 1);
      if (off + 4 * n > blob.length) {
        throw new SourceError(
          `shard data ends before tensor ${w.name} (need ${4 * n} bytes at offset ${off})`,
        );
      }
      const data = new Float32Array(n);
      const view = new DataView(blob.buffer, blob.byteOffset + off);
      for (let i = 0; i < n; i++) {
        data[i] = view.getFloat32(4 * i, true);
      }
      off += 4 * n;
      if (tensors.has(w.name)) {
        throw new SourceError(`duplicate tensor name ${w.name} in source archive`);
      }
      tensors.set(w.name, { name: w.name, shape: w.shape, data });
    }
    if (off !== blob.length) {
      throw new SourceError(
        `shard data has ${blob.length - off} trailing bytes after the listed tensors`,
      );
    }
  }
  return tensors;
}

/**
 * Conversion manifest: how to map a tfjs-style weight archive onto the
 * canonical VGG-19 prefix expected by the synthesis engine.
 */

import { z } from 'zod';

/** Canonical (kh, kw, cin, cout) shapes of the 12-conv VGG-19 prefix. */
export const CANONICAL_CONV_SHAPES: Record<string, [number, number, number, number]> = {
  conv1_1: [3, 3, 3, 64],
  conv1_2: [3, 3, 64, 64],
  conv2_1: [3, 3, 64, 128],
  conv2_2: [3, 3, 128, 128],
  conv3_1: [3, 3, 128, 256],
  conv3_2: [3, 3, 256, 256],
  conv3_3: [3, 3, 256, 256],
  conv3_4: [3, 3, 256, 256],
  conv4_1: [3, 3, 256, 512],
  conv4_2: [3, 3, 512, 512],
  conv4_3: [3, 3, 512, 512],
  conv4_4: [3, 3, 512, 512],
};

export const CANONICAL_LAYER_NAMES = Object.keys(CANONICAL_CONV_SHAPES);

const layerEntry = z.object({
  kernel: z.string(),
  bias: z.string(),
});

export const conversionManifestSchema = z.object({
  layers: z.record(z.string(), layerEntry),
  means: z.array(z.number()).length(3),
  avg_pool: z.boolean().default(false),
  // layout of the 4-d kernels in the source archive
  source_layout: z.enum(['hwio', 'oihw']).default('hwio'),
});

export type ConversionManifest = z.infer<typeof conversionManifestSchema>;

export class ManifestError extends Error {}

/** Validate a parsed JSON object and the exactly-once layer mapping. */
export function loadConversionManifest(json: unknown): ConversionManifest {
  const parsed = conversionManifestSchema.safeParse(json);
  if (!parsed.success) {
    throw new ManifestError(`invalid conversion manifest: ${parsed.error.message}`);
  }
  const manifest = parsed.data;
  const mapped = Object.keys(manifest.layers);
  for (const name of CANONICAL_LAYER_NAMES) {
    if (!mapped.includes(name)) {
      throw new ManifestError(`conversion manifest missing layer ${name}`);
    }
  }
  for (const name of mapped) {
    if (!CANONICAL_LAYER_NAMES.includes(name)) {
      throw new ManifestError(`conversion manifest maps unknown layer ${name}`);
    }
  }
  const sources = Object.values(manifest.layers).flatMap((e) => [e.kernel, e.bias]);
  if (new Set(sources).size !== sources.length) {
    throw new ManifestError('conversion manifest maps a source tensor more than once');
  }
  return manifest;
}

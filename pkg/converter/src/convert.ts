/**
 * Core conversion: map source tensors onto the canonical VGG-19 prefix,
 * transpose kernels to kh x kw x cin x cout order, and serialize the
 * engine's DTWB weight file.
 */

import { CANONICAL_CONV_SHAPES, CANONICAL_LAYER_NAMES, ConversionManifest } from './manifest.js';
import { FLAG_AVG_POOL, KIND_VGG, NamedTensor, serializeWeightFile } from './weightfile.js';

export class ConversionError extends Error {}

function shapesEqual(a: number[], b: number[]): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i]);
}

/** Transpose a (cout, cin, kh, kw) kernel to (kh, kw, cin, cout). */
export function oihwToHwio(t: NamedTensor): NamedTensor {
  const [co, ci, kh, kw] = t.shape;
  const out = new Float32Array(t.data.length);
  for (let o = 0; o < co; o++) {
    for (let i = 0; i < ci; i++) {
      for (let y = 0; y < kh; y++) {
        for (let x = 0; x < kw; x++) {
          out[((y * kw + x) * ci + i) * co + o] =
            t.data[((o * ci + i) * kh + y) * kw + x];
        }
      }
    }
  }
  return { name: t.name, shape: [kh, kw, ci, co], data: out };
}

export function convert(
  source: Map<string, NamedTensor>,
  manifest: ConversionManifest,
): Buffer {
  const tensors: NamedTensor[] = [
    { name: 'mean', shape: [3], data: Float32Array.from(manifest.means) },
  ];
  for (const layer of CANONICAL_LAYER_NAMES) {
    const entry = manifest.layers[layer];
    let kernel = source.get(entry.kernel);
    const bias = source.get(entry.bias);
    if (!kernel) {
      throw new ConversionError(`source archive is missing kernel tensor for ${layer} (${entry.kernel})`);
    }
    if (!bias) {
      throw new ConversionError(`source archive is missing bias tensor for ${layer} (${entry.bias})`);
    }
    if (manifest.source_layout === 'oihw') {
      if (kernel.shape.length !== 4) {
        throw new ConversionError(`kernel for ${layer} must be rank 4, got rank ${kernel.shape.length}`);
      }
      kernel = oihwToHwio(kernel);
    }
    const want = CANONICAL_CONV_SHAPES[layer];
    if (!shapesEqual(kernel.shape, want)) {
      throw new ConversionError(
        `kernel for ${layer} has shape ${kernel.shape.join('x')}, expected ${want.join('x')}`,
      );
    }
    if (!shapesEqual(bias.shape, [want[3]])) {
      throw new ConversionError(
        `bias for ${layer} has shape ${bias.shape.join('x')}, expected ${want[3]}`,
      );
    }
    tensors.push({ name: `${layer}.kernel`, shape: kernel.shape, data: kernel.data });
    tensors.push({ name: `${layer}.bias`, shape: bias.shape, data: bias.data });
  }
  const flags = manifest.avg_pool ? FLAG_AVG_POOL : 0;
  return serializeWeightFile(KIND_VGG, flags, tensors);
}

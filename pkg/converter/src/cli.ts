#!/usr/bin/env node
/**
 * dtwb-convert <source-manifest.json> <conversion-manifest.json> <out.dtwb>
 *
 * Reads a tfjs-style weight archive and writes the engine's DTWB
 * weight file. Exits 1 on usage errors, 2 on conversion failures.
 */

import * as fs from 'node:fs';

import { convert, ConversionError } from './convert.js';
import { loadConversionManifest, ManifestError } from './manifest.js';
import { readSourceArchive, SourceError } from './source.js';
import { WeightFileError } from './weightfile.js';

function usage(): never {
  console.error('usage: dtwb-convert <source-manifest.json> <conversion-manifest.json> <out.dtwb>');
  process.exit(1);
}

export function main(argv: string[]): number {
  if (argv.length !== 3) {
    usage();
  }
  const [sourcePath, manifestPath, outPath] = argv;
  try {
    const manifestJson = JSON.parse(fs.readFileSync(manifestPath, 'utf8'));
    const manifest = loadConversionManifest(manifestJson);
    const source = readSourceArchive(sourcePath);
    const blob = convert(source, manifest);
    fs.writeFileSync(outPath, blob);
    console.log(`wrote ${blob.length} bytes to ${outPath}`);
    return 0;
  } catch (err) {
    if (
      err instanceof ConversionError ||
      err instanceof ManifestError ||
      err instanceof SourceError ||
      err instanceof WeightFileError ||
      err instanceof SyntaxError
    ) {
      console.error(`error: ${err.message}`);
      return 2;
    }
    throw err;
  }
}

import { pathToFileURL } from 'node:url';

if (process.argv[1] && import.meta.url === pathToFileURL(process.argv[1]).href) {
  process.exit(main(process.argv.slice(2)));
}

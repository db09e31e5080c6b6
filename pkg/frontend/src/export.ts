/**
 * Stack exporter: runs the model T times per image with dropout active,
 * applies softmax, writes one tensor-stack file per image, and updates the
 * manifest's stack_path fields. Per-image model failures are recorded and
 * skipped rather than aborting the export.
 */

import { join, relative, dirname, resolve } from 'path'

import { loadManifest, saveManifest, ManifestDoc, ManifestEntry } from './manifest.js'
import { LogitsModel, LogitsMap, ImageRef } from './model.js'
import { writeStack } from './tensorfile.js'
import { rngFrom } from './rng.js'

export interface BridgeConfig {
  model: LogitsModel
  /** stochastic forward passes per image */
  passes?: number
  dropoutEnabled?: boolean
  dropoutRate?: number
  /** manifest splits to export; default train+val+test */
  splits?: string[]
  outputDir: string
  seed?: number
}

export interface ExportFailure {
  id: string
  split: string
  error: string
}

export interface ExportSummary {
  exported: number
  failed: ExportFailure[]
  manifestPath: string
  passes: number
  dropoutEnabled: boolean
  dropoutRate: number
}

function softmaxInto(stack: Float32Array, logits: LogitsMap, passIndex: number) {
  const { classes, height, width, values } = logits
  const plane = height * width
  const base = passIndex * classes * plane
  for (let p = 0; p < plane; p++) {
    let max = -Infinity
    for (let c = 0; c < classes; c++) max = Math.max(max, values[c * plane + p])
    let sum = 0
    for (let c = 0; c < classes; c++) {
      const e = Math.exp(values[c * plane + p] - max)
      stack[base + c * plane + p] = e
      sum += e
    }
    for (let c = 0; c < classes; c++) stack[base + c * plane + p] /= sum
  }
}

function passSeed(seed: number, imageId: string, passIndex: number): number {
  return Math.floor(rngFrom(seed, 'pass', imageId, passIndex)() * 0xffffffff)
}

export async function exportStacks(
  config: BridgeConfig,
  manifestPath: string,
): Promise<ExportSummary> {
  const passes = config.passes ?? 50
  const dropoutEnabled = config.dropoutEnabled ?? true
  const dropoutRate = config.dropoutRate ?? 0.2
  const seed = config.seed ?? 0
  if (passes < 1) throw new Error(`need at least one pass, got ${passes}`)
  if (dropoutRate < 0 || dropoutRate >= 1) {
    throw new Error(`dropout rate must be in [0, 1), got ${dropoutRate}`)
  }

  const manifest: ManifestDoc = loadManifest(manifestPath)
  const splits = config.splits ?? Object.keys(manifest.splits)
  const outDir = resolve(config.outputDir)
  const outManifestPath = join(outDir, 'manifest.json')
  const failed: ExportFailure[] = []
  let exported = 0

  for (const split of splits) {
    const entries = manifest.splits[split]
    if (!entries) throw new Error(`manifest has no split '${split}'`)
    for (const entry of entries as ManifestEntry[]) {
      const image: ImageRef = { id: entry.id, imagePath: entry.image_path, meta: entry.meta }
      try {
        let stack: Float32Array | null = null
        let dims: number[] = []
        for (let t = 0; t < passes; t++) {
          const logits = await config.model(image, {
            passIndex: t,
            dropoutEnabled,
            dropoutRate,
            seed: passSeed(seed, entry.id, t),
          })
          if (logits.classes < 2) throw new Error('model must emit at least two classes')
          if (stack === null) {
            dims = [passes, logits.classes, logits.height, logits.width]
            stack = new Float32Array(passes * logits.classes * logits.height * logits.width)
          } else if (
            dims[1] !== logits.classes ||
            dims[2] !== logits.height ||
            dims[3] !== logits.width
          ) {
            throw new Error(`pass ${t} changed the output shape`)
          }
          softmaxInto(stack, logits, t)
        }
        const stackFile = join(outDir, 'stacks', `${entry.id}.mcds`)
        writeStack(stack!, dims, stackFile)
        entry.stack_path = relative(dirname(outManifestPath), stackFile)
        exported += 1
      } catch (error) {
        failed.push({ id: entry.id, split, error: String(error) })
      }
    }
  }

  saveManifest(manifest, outManifestPath)
  return {
    exported,
    failed,
    manifestPath: outManifestPath,
    passes,
    dropoutEnabled,
    dropoutRate,
  }
}

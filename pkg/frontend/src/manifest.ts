/**
 * Manifest JSON handling. The document is kept as plain parsed JSON and
 * mutated in place, so fields this bridge does not know about survive
 * round-trips untouched.
 */

import { readFileSync, writeFileSync, renameSync, mkdirSync } from 'fs'
import { dirname, join, basename } from 'path'

export interface ManifestEntry {
  id: string
  image_path?: string
  stack_path?: string
  label_path?: string
  meta?: Record<string, unknown>
  [key: string]: unknown
}

export interface ManifestDoc {
  schema_version: number
  splits: Record<string, ManifestEntry[]>
  [key: string]: unknown
}

export class ManifestError extends Error {}

export function loadManifest(path: string): ManifestDoc {
  const doc = JSON.parse(readFileSync(path, 'utf-8'))
  if (doc.schema_version !== 1) {
    throw new ManifestError(`unsupported manifest schema_version ${doc.schema_version}`)
  }
  if (typeof doc.splits !== 'object' || doc.splits === null) {
    throw new ManifestError('manifest is missing the splits object')
  }
  const seen = new Set<string>()
  for (const entries of Object.values(doc.splits) as ManifestEntry[][]) {
    for (const entry of entries) {
      if (!entry.id || typeof entry.id !== 'string') {
        throw new ManifestError(`manifest entry missing a string id: ${JSON.stringify(entry)}`)
      }
      if (seen.has(entry.id)) throw new ManifestError(`duplicate image id ${entry.id}`)
      seen.add(entry.id)
    }
  }
  return doc as ManifestDoc
}

export function saveManifest(doc: ManifestDoc, path: string) {
  mkdirSync(dirname(path), { recursive: true })
  const tmp = join(dirname(path), `.${basename(path)}.${process.pid}.tmp`)
  writeFileSync(tmp, JSON.stringify(doc, null, 2) + '\n')
  renameSync(tmp, path)
}

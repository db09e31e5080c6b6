export {
  BadMagicError,
  ProbabilitySumError,
  TensorFileError,
  TruncatedPayloadError,
  VersionMismatchError,
  decodeTensor,
  encodeTensor,
  readStack,
  readTensor,
  validateStackSums,
  writeStack,
  writeTensor,
} from './tensorfile.js'
export type { TensorData } from './tensorfile.js'
export { loadManifest, saveManifest, ManifestError } from './manifest.js'
export type { ManifestDoc, ManifestEntry } from './manifest.js'
export { demoModel } from './model.js'
export type { ImageRef, LogitsMap, LogitsModel, PassContext } from './model.js'
export { exportStacks } from './export.js'
export type { BridgeConfig, ExportSummary } from './export.js'
export { decodeNpy, encodeNpy, mcdsToNpy, npyToMcds } from './npy.js'
export { rngFrom, normalFrom } from './rng.js'

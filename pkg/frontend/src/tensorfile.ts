/**
 * Binary tensor container shared with the mcdal engine.
 *
 * Layout (little-endian): magic "MCDS", version u16 (=1), dtype u8
 * (1 = float32, 2 = uint8), ndim u8, dims ndim x u32, then the row-major
 * payload. Probability stacks are float32 [T, C, H, W] whose class
 * probabilities sum to 1 at every (pass, pixel); stacks are validated
 * before writing so a consumer never sees a malformed file from us.
 */

import { readFileSync, writeFileSync, renameSync, mkdirSync } from 'fs'
import { dirname, join, basename } from 'path'

export const MAGIC = 'MCDS'
export const FORMAT_VERSION = 1
export const SUM_TOLERANCE = 1e-4

export class TensorFileError extends Error {}
export class BadMagicError extends TensorFileError {}
export class VersionMismatchError extends TensorFileError {}
export class TruncatedPayloadError extends TensorFileError {}
export class ProbabilitySumError extends TensorFileError {}

export interface TensorData {
  dtype: 'float32' | 'uint8'
  dims: number[]
  /** row-major values */
  data: Float32Array | Uint8Array
}

function atomicWrite(path: string, buffer: Buffer) {
  mkdirSync(dirname(path), { recursive: true })
  const tmp = join(dirname(path), `.${basename(path)}.${process.pid}.tmp`)
  writeFileSync(tmp, buffer)
  renameSync(tmp, path)
}

export function encodeTensor(tensor: TensorData): Buffer {
  const { dtype, dims, data } = tensor
  const count = dims.reduce((a, b) => a * b, 1)
  if (count !== data.length) {
    throw new TensorFileError(`dims ${dims} hold ${count} values, data has ${data.length}`)
  }
  const itemSize = dtype === 'float32' ? 4 : 1
  const header = Buffer.alloc(8 + 4 * dims.length)
  header.write(MAGIC, 0, 'ascii')
  header.writeUInt16LE(FORMAT_VERSION, 4)
  header.writeUInt8(dtype === 'float32' ? 1 : 2, 6)
  header.writeUInt8(dims.length, 7)
  dims.forEach((dim, index) => header.writeUInt32LE(dim, 8 + 4 * index))
  const payload = Buffer.alloc(count * itemSize)
  if (dtype === 'float32') {
    const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength)
    const values = data as Float32Array
    for (let i = 0; i < count; i++) view.setFloat32(4 * i, values[i], true)
  } else {
    payload.set(data as Uint8Array)
  }
  return Buffer.concat([header, payload])
}

export function decodeTensor(buffer: Buffer, source = '<buffer>'): TensorData {
  if (buffer.length < 4) throw new TruncatedPayloadError(`${source}: shorter than the magic header`)
  if (buffer.toString('ascii', 0, 4) !== MAGIC) {
    throw new BadMagicError(`${source}: bad magic ${buffer.subarray(0, 4).toString('hex')}`)
  }
  if (buffer.length < 8) throw new TruncatedPayloadError(`${source}: truncated header`)
  const version = buffer.readUInt16LE(4)
  if (version !== FORMAT_VERSION) {
    throw new VersionMismatchError(`${source}: unsupported format version ${version}`)
  }
  const dtypeCode = buffer.readUInt8(6)
  const ndim = buffer.readUInt8(7)
  if (dtypeCode !== 1 && dtypeCode !== 2) {
    throw new TensorFileError(`${source}: unknown dtype code ${dtypeCode}`)
  }
  const dimsEnd = 8 + 4 * ndim
  if (buffer.length < dimsEnd) throw new TruncatedPayloadError(`${source}: truncated dims`)
  const dims: number[] = []
  for (let i = 0; i < ndim; i++) dims.push(buffer.readUInt32LE(8 + 4 * i))
  const count = dims.reduce((a, b) => a * b, 1)
  const itemSize = dtypeCode === 1 ? 4 : 1
  const expected = count * itemSize
  const payload = buffer.subarray(dimsEnd)
  if (payload.length < expected) {
    throw new TruncatedPayloadError(`${source}: truncated payload (${payload.length} of ${expected} bytes)`)
  }
  if (payload.length > expected) {
    throw new TensorFileError(`${source}: ${payload.length - expected} trailing bytes`)
  }
  if (dtypeCode === 1) {
    const view = new DataView(payload.buffer, payload.byteOffset, expected)
    const data = new Float32Array(count)
    for (let i = 0; i < count; i++) data[i] = view.getFloat32(4 * i, true)
    return { dtype: 'float32', dims, data }
  }
  return { dtype: 'uint8', dims, data: new Uint8Array(payload.subarray(0, expected)) }
}

export function writeTensor(tensor: TensorData, path: string) {
  atomicWrite(path, encodeTensor(tensor))
}

export function readTensor(path: string): TensorData {
  return decodeTensor(readFileSync(path), path)
}

/** Validate class-probability sums of a [T, C, H, W] stack; throws with coordinates. */
export function validateStackSums(data: Float32Array, dims: number[]) {
  if (dims.length !== 4) {
    throw new TensorFileError(`stacks must be [T, C, H, W], got rank ${dims.length}`)
  }
  const [t, c, h, w] = dims
  const plane = h * w
  for (let ti = 0; ti < t; ti++) {
    for (let p = 0; p < plane; p++) {
      let sum = 0
      for (let ci = 0; ci < c; ci++) sum += data[ti * c * plane + ci * plane + p]
      if (Math.abs(sum - 1) > SUM_TOLERANCE) {
        const hi = Math.floor(p / w)
        const wi = p % w
        throw new ProbabilitySumError(
          `class probabilities at (t=${ti}, h=${hi}, w=${wi}) sum to ${sum.toFixed(6)}, not 1`,
        )
      }
    }
  }
}

export function writeStack(data: Float32Array, dims: number[], path: string) {
  validateStackSums(data, dims)
  writeTensor({ dtype: 'float32', dims, data }, path)
}

export function readStack(path: string): TensorData {
  const tensor = readTensor(path)
  if (tensor.dtype !== 'float32' || tensor.dims.length !== 4) {
    throw new TensorFileError(`${path}: stacks must be float32 [T, C, H, W]`)
  }
  validateStackSums(tensor.data as Float32Array, tensor.dims)
  return tensor
}

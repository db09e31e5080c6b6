/**
 * Converter between the engine's tensor container and NumPy's .npy format
 * (version 1.0), for interop with the wider ecosystem.
 */

import { readFileSync, writeFileSync } from 'fs'

import { TensorData, TensorFileError, readTensor, writeTensor } from './tensorfile.js'

const NPY_MAGIC = Buffer.from('\x93NUMPY', 'latin1')

export function encodeNpy(tensor: TensorData): Buffer {
  const descr = tensor.dtype === 'float32' ? '<f4' : '|u1'
  const shape = tensor.dims.join(', ') + (tensor.dims.length === 1 ? ',' : '')
  let header = `{'descr': '${descr}', 'fortran_order': False, 'shape': (${shape}), }`
  const unpadded = NPY_MAGIC.length + 4 + header.length + 1
  header += ' '.repeat((64 - (unpadded % 64)) % 64) + '\n'
  const head = Buffer.alloc(NPY_MAGIC.length + 4 + header.length)
  NPY_MAGIC.copy(head, 0)
  head.writeUInt8(1, 6) // major version
  head.writeUInt8(0, 7)
  head.writeUInt16LE(header.length, 8)
  head.write(header, 10, 'latin1')
  const itemSize = tensor.dtype === 'float32' ? 4 : 1
  const payload = Buffer.alloc(tensor.data.length * itemSize)
  if (tensor.dtype === 'float32') {
    const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength)
    const values = tensor.data as Float32Array
    for (let i = 0; i < values.length; i++) view.setFloat32(4 * i, values[i], true)
  } else {
    payload.set(tensor.data as Uint8Array)
  }
  return Buffer.concat([head, payload])
}

export function decodeNpy(buffer: Buffer, source = '<buffer>'): TensorData {
  if (!buffer.subarray(0, 6).equals(NPY_MAGIC)) {
    throw new TensorFileError(`${source}: not an npy file`)
  }
  const major = buffer.readUInt8(6)
  if (major !== 1) throw new TensorFileError(`${source}: unsupported npy version ${major}`)
  const headerLength = buffer.readUInt16LE(8)
  const header = buffer.toString('latin1', 10, 10 + headerLength)
  const descrMatch = header.match(/'descr':\s*'([^']+)'/)
  const orderMatch = header.match(/'fortran_order':\s*(True|False)/)
  const shapeMatch = header.match(/'shape':\s*\(([^)]*)\)/)
  if (!descrMatch || !orderMatch || !shapeMatch) {
    throw new TensorFileError(`${source}: unparseable npy header: ${header}`)
  }
  if (orderMatch[1] === 'True') {
    throw new TensorFileError(`${source}: fortran-order arrays are not supported`)
  }
  const dims = shapeMatch[1]
    .split(',')
    .map((s) => s.trim())
    .filter((s) => s.length > 0)
    .map(Number)
  const count = dims.reduce((a, b) => a * b, 1)
  const payload = buffer.subarray(10 + headerLength)
  if (descrMatch[1] === '<f4') {
    if (payload.length < 4 * count) throw new TensorFileError(`${source}: truncated npy payload`)
    const view = new DataView(payload.buffer, payload.byteOffset, 4 * count)
    const data = new Float32Array(count)
    for (let i = 0; i < count; i++) data[i] = view.getFloat32(4 * i, true)
    return { dtype: 'float32', dims, data }
  }
  if (descrMatch[1] === '|u1' || descrMatch[1] === 'uint8') {
    if (payload.length < count) throw new TensorFileError(`${source}: truncated npy payload`)
    return { dtype: 'uint8', dims, data: new Uint8Array(payload.subarray(0, count)) }
  }
  throw new TensorFileError(`${source}: unsupported npy dtype ${descrMatch[1]}`)
}

export function mcdsToNpy(input: string, output: string) {
  writeFileSync(output, encodeNpy(readTensor(input)))
}

export function npyToMcds(input: string, output: string) {
  const tensor = decodeNpy(readFileSync(input), input)
  writeTensor(tensor, output)
}

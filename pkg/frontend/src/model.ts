/**
 * Model contract: the bridge drives any callable producing per-class logits
 * for an image. The callable receives the pass context (pass index, dropout
 * switch, rate, derived seed) and must return identical logits for every
 * pass when dropout is disabled. Softmax is applied by the bridge, never by
 * the model, so double-softmax bugs are impossible by construction.
 *
 * A wrapper for a tfjs or ONNX model just has to run its forward pass with
 * dropout layers active and copy the logits into a Float32Array.
 */

import { rngFrom } from './rng.js'

export interface ImageRef {
  id: string
  imagePath?: string
  meta?: Record<string, unknown>
}

export interface PassContext {
  passIndex: number
  dropoutEnabled: boolean
  dropoutRate: number
  /** derived from (export seed, image id, pass index); stable across runs */
  seed: number
}

export interface LogitsMap {
  classes: number
  height: number
  width: number
  /** row-major [C, H, W] logits */
  values: Float32Array
}

export type LogitsModel = (image: ImageRef, ctx: PassContext) => LogitsMap | Promise<LogitsMap>

export interface DemoModelOptions {
  classes?: number
  height?: number
  width?: number
  /** hidden feature count the dropout masks act on */
  features?: number
}

/**
 * Built-in demo model: a fixed random linear read-out over sinusoidal hidden
 * features of a scene synthesized from the image id, with inverted dropout
 * on the hidden features. Deterministic given (image id, pass seed); with
 * dropout disabled every pass is identical.
 */
export function demoModel(options: DemoModelOptions = {}): LogitsModel {
  const classes = options.classes ?? 5
  const height = options.height ?? 16
  const width = options.width ?? 16
  const features = options.features ?? 16

  // Fixed read-out weights, independent of the image.
  const weightRng = rngFrom('demo-weights', classes, features)
  const weights = new Float32Array(classes * features)
  for (let i = 0; i < weights.length; i++) weights[i] = (weightRng() - 0.5) * 2

  return (image, ctx) => {
    const sceneRng = rngFrom('demo-scene', image.id)
    const freqX = new Float32Array(features)
    const freqY = new Float32Array(features)
    const phase = new Float32Array(features)
    for (let k = 0; k < features; k++) {
      freqX[k] = 0.2 + sceneRng() * 1.3
      freqY[k] = 0.2 + sceneRng() * 1.3
      phase[k] = sceneRng() * 2 * Math.PI
    }

    const mask = new Float32Array(features).fill(1)
    if (ctx.dropoutEnabled) {
      const keep = 1 - ctx.dropoutRate
      const dropRng = rngFrom(ctx.seed, 'mask', image.id, ctx.passIndex)
      for (let k = 0; k < features; k++) {
        mask[k] = dropRng() < keep ? 1 / keep : 0
      }
    }

    const values = new Float32Array(classes * height * width)
    const hidden = new Float32Array(features)
    for (let y = 0; y < height; y++) {
      for (let x = 0; x < width; x++) {
        for (let k = 0; k < features; k++) {
          hidden[k] = Math.sin(freqX[k] * x + freqY[k] * y + phase[k]) * mask[k]
        }
        for (let c = 0; c < classes; c++) {
          let logit = 0
          for (let k = 0; k < features; k++) logit += weights[c * features + k] * hidden[k]
          values[c * height * width + y * width + x] = logit / Math.sqrt(features)
        }
      }
    }
    return { classes, height, width, values }
  }
}

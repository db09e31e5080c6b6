#!/usr/bin/env node
/**
 * mcds-bridge CLI.
 *
 *   mcds-bridge export --manifest m.json --out dir [--passes 50]
 *       [--dropout-rate 0.2] [--no-dropout] [--seed 0] [--splits train,val]
 *       [--model demo | --model ./wrapper.mjs]
 *   mcds-bridge convert <input> <output>      # .mcds <-> .npy by extension
 */

import { pathToFileURL } from 'url'

import { exportStacks } from './export.js'
import { demoModel, LogitsModel } from './model.js'
import { mcdsToNpy, npyToMcds } from './npy.js'

function parseFlags(argv: string[]): { positional: string[]; flags: Map<string, string | boolean> } {
  const positional: string[] = []
  const flags = new Map<string, string | boolean>()
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i]
    if (!arg.startsWith('--')) {
      positional.push(arg)
      continue
    }
    const name = arg.slice(2)
    const next = argv[i + 1]
    if (next !== undefined && !next.startsWith('--')) {
      flags.set(name, next)
      i++
    } else {
      flags.set(name, true)
    }
  }
  return { positional, flags }
}

async function loadModel(spec: string): Promise<LogitsModel> {
  if (spec === 'demo') return demoModel()
  const mod = await import(pathToFileURL(spec).href)
  const model = mod.default ?? mod.model
  if (typeof model !== 'function') {
    throw new Error(`${spec} must export a LogitsModel as default or 'model'`)
  }
  return model as LogitsModel
}

async function main() {
  const [command, ...rest] = process.argv.slice(2)
  const { positional, flags } = parseFlags(rest)

  if (command === 'export') {
    const manifest = flags.get('manifest')
    const out = flags.get('out')
    if (typeof manifest !== 'string' || typeof out !== 'string') {
      console.error('usage: mcds-bridge export --manifest <file> --out <dir> [options]')
      process.exit(2)
    }
    const model = await loadModel(typeof flags.get('model') === 'string' ? (flags.get('model') as string) : 'demo')
    const summary = await exportStacks(
      {
        model,
        outputDir: out,
        passes: flags.has('passes') ? Number(flags.get('passes')) : undefined,
        dropoutEnabled: !flags.has('no-dropout'),
        dropoutRate: flags.has('dropout-rate') ? Number(flags.get('dropout-rate')) : undefined,
        seed: flags.has('seed') ? Number(flags.get('seed')) : undefined,
        splits: typeof flags.get('splits') === 'string' ? (flags.get('splits') as string).split(',') : undefined,
      },
      manifest,
    )
    console.log(JSON.stringify(summary, null, 2))
    process.exit(summary.exported === 0 && summary.failed.length > 0 ? 1 : 0)
  }

  if (command === 'convert') {
    const [input, output] = positional
    if (!input || !output) {
      console.error('usage: mcds-bridge convert <input> <output>')
      process.exit(2)
    }
    if (input.endsWith('.mcds') && output.endsWith('.npy')) {
      mcdsToNpy(input, output)
    } else if (input.endsWith('.npy') && output.endsWith('.mcds')) {
      npyToMcds(input, output)
    } else {
      console.error('convert needs one .mcds and one .npy path')
      process.exit(2)
    }
    console.log(`${input} -> ${output}`)
    process.exit(0)
  }

  console.error('usage: mcds-bridge <export|convert> ...')
  process.exit(2)
}

main().catch((error) => {
  console.error(`error: ${error?.message ?? error}`)
  process.exit(1)
})

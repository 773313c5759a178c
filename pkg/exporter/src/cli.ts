#!/usr/bin/env node
/** CLI: export --input CKPT --output NAME [--allowlist FILE] */

import * as fs from "fs";
import { parseArgs } from "util";

import { exportCheckpoint } from "./convert";
import {
  CheckpointParseError,
  ShapeMismatchError,
  UnsupportedOperatorError,
} from "./types";

export function main(argv: string[]): number {
  let parsed;
  try {
    parsed = parseArgs({
      args: argv,
      allowPositionals: true,
      options: {
        input: { type: "string" },
        output: { type: "string" },
        allowlist: { type: "string" },
      },
    });
  } catch (e) {
    console.error(`error: ${(e as Error).message}`);
    return 2;
  }
  const [command] = parsed.positionals;
  if (command !== "export" || !parsed.values.input || !parsed.values.output) {
    console.error("usage: concatprune-export export --input CKPT.json --output NAME [--allowlist FILE]");
    return 2;
  }
  let allowlist: string[] | undefined;
  if (parsed.values.allowlist) {
    try {
      allowlist = JSON.parse(fs.readFileSync(parsed.values.allowlist, "utf-8"));
    } catch (e) {
      console.error(`error: cannot read allowlist: ${(e as Error).message}`);
      return 2;
    }
    if (!Array.isArray(allowlist) || allowlist.some((v) => typeof v !== "string")) {
      console.error("error: allowlist file must hold a JSON array of op names");
      return 2;
    }
  }
  try {
    const result = exportCheckpoint({
      checkpointPath: parsed.values.input,
      outputName: parsed.values.output,
      allowlist,
      log: (line) => console.log(line),
    });
    console.log(`exported ${result.layerCount} layers`);
    return 0;
  } catch (e) {
    if (
      e instanceof UnsupportedOperatorError ||
      e instanceof CheckpointParseError ||
      e instanceof ShapeMismatchError
    ) {
      console.error(`error: ${e.message}`);
      return 2;
    }
    console.error(`internal error: ${e}`);
    return 1;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}

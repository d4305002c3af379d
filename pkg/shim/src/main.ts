#!/usr/bin/env node
// Predictor shim entry point. Reads wire-protocol requests on stdin and
// answers on stdout; a malformed request produces an error line and the
// loop keeps serving.
//
// Usage:
//   node dist/main.js --probs <directory>   serve stored probability maps
//   node dist/main.js --mode echo           answer from the request blob

import { FrameParser, encodeError, handleRequest, Responder } from "./protocol";
import { ProbabilityStore, echoResponder } from "./probstore";

interface Args {
  probs?: string;
  mode: string;
}

function parseArgs(argv: string[]): Args {
  const args: Args = { mode: "probs" };
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg === "--probs" && argv[i + 1]) {
      args.probs = argv[++i];
    } else if (arg === "--mode" && argv[i + 1]) {
      args.mode = argv[++i];
    } else if (arg === "--help" || arg === "-h") {
      process.stderr.write("usage: main.js --probs <dir> | --mode echo\n");
      process.exit(0);
    } else {
      process.stderr.write(`unknown argument ${arg}\n`);
      process.exit(1);
    }
  }
  return args;
}

function buildResponder(args: Args): Responder {
  if (args.mode === "echo") {
    return echoResponder();
  }
  if (!args.probs) {
    process.stderr.write("--probs <directory> is required unless --mode echo\n");
    process.exit(1);
  }
  return new ProbabilityStore(args.probs).responder();
}

export function serve(responder: Responder): void {
  const parser = new FrameParser();
  process.stdin.on("data", (chunk: Buffer) => {
    for (const item of parser.feed(chunk)) {
      if (item.request) {
        process.stdout.write(handleRequest(item.request, responder));
      } else {
        process.stdout.write(encodeError(item.requestId, item.error ?? "bad request"));
      }
    }
  });
  process.stdin.on("end", () => process.exit(0));
}

if (require.main === module) {
  serve(buildResponder(parseArgs(process.argv.slice(2))));
}

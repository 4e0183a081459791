#!/usr/bin/env node
// Wire-protocol host: answers init_pair / predict requests over stdio.
//
// Usage: host --mode stub --answers <dir>
//
// Stub mode replays recorded payloads keyed by the request's view ids.
// Every well-delimited frame gets exactly one response; malformed frames get
// an error frame and the loop continues. The process only exits on EOF.

import { AnswerStore } from "./stub.js";
import {
  FrameReader,
  Header,
  PROTOCOL_VERSION,
  ProtocolError,
  decodePayload,
  encodePayload,
  errorPayload,
  frame,
} from "./framing.js";

interface Args {
  mode: string;
  answers: string;
}

function parseArgs(argv: string[]): Args {
  const args: Args = { mode: "stub", answers: "" };
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === "--mode" && argv[i + 1]) {
      args.mode = argv[++i];
    } else if (argv[i] === "--answers" && argv[i + 1]) {
      args.answers = argv[++i];
    } else {
      process.stderr.write(`unknown argument ${argv[i]}\n`);
      process.exit(2);
    }
  }
  if (args.mode !== "stub") {
    process.stderr.write(`unsupported mode ${args.mode}; only stub is available\n`);
    process.exit(2);
  }
  if (!args.answers) {
    process.stderr.write("--answers <dir> is required in stub mode\n");
    process.exit(2);
  }
  return args;
}

function asViewId(value: unknown): number | undefined {
  return typeof value === "number" && Number.isInteger(value) && value >= 0
    ? value
    : undefined;
}

function handle(header: Header, store: AnswerStore): Buffer {
  switch (header.msg) {
    case "hello": {
      if (header.version !== PROTOCOL_VERSION) {
        return errorPayload(`unsupported version ${header.version}`);
      }
      return encodePayload({ msg: "hello", version: PROTOCOL_VERSION });
    }
    case "init_pair": {
      const a = asViewId(header.view_a);
      const b = asViewId(header.view_b);
      if (a === undefined || b === undefined) {
        return errorPayload("init_pair needs integer view_a and view_b");
      }
      const recorded = store.initPair(a, b);
      return recorded ?? errorPayload(`no recorded answer for pair (${a}, ${b})`);
    }
    case "predict": {
      const ref = asViewId(header.ref_view_id);
      const tgt = asViewId(header.tgt_view_id);
      if (ref === undefined || tgt === undefined) {
        return errorPayload("predict needs integer ref_view_id and tgt_view_id");
      }
      const recorded = store.predict(ref, tgt);
      return recorded ?? errorPayload(`no recorded answer for pair (${ref}, ${tgt})`);
    }
    default:
      return errorPayload(`unknown message ${header.msg}`);
  }
}

export function main(): void {
  const args = parseArgs(process.argv.slice(2));
  const store = new AnswerStore(args.answers);
  const reader = new FrameReader();

  const respond = (payload: Buffer) => {
    process.stdout.write(frame(payload));
  };

  process.stdin.on("data", (chunk: Buffer) => {
    try {
      reader.push(
        chunk,
        (payload) => {
          try {
            const { header } = decodePayload(payload);
            respond(handle(header, store));
          } catch (e) {
            const detail = e instanceof ProtocolError ? e.message : `internal: ${e}`;
            respond(errorPayload(detail));
          }
        },
        (len) => respond(errorPayload(`declared payload of ${len} bytes exceeds cap`)),
      );
    } catch (e) {
      // never let a poisoned chunk take the process down
      process.stderr.write(`frame loop error: ${e}\n`);
    }
  });
  process.stdin.on("end", () => process.exit(0));
}

main();

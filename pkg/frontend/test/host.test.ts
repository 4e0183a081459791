import assert from "node:assert/strict";
import { spawn, ChildProcess } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { after, before, test } from "node:test";

import { FrameReader, decodePayload, encodePayload, frame } from "../src/framing.js";

const HOST = fileURLToPath(new URL("../src/host.js", import.meta.url));

function makeAnswers(): string {
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), "answers-"));
  const pm = Buffer.alloc(2 * 2 * 3 * 4);
  for (let i = 0; i < 12; i++) pm.writeFloatLE(i * 0.5, i * 4);
  const conf = Buffer.alloc(2 * 2 * 4);
  for (let i = 0; i < 4; i++) conf.writeFloatLE(1.5, i * 4);
  const predictPayload = encodePayload(
    { msg: "response",
      tensors: [{ name: "tgt_pointmap", dtype: "f32", shape: [2, 2, 3] },
                { name: "tgt_conf", dtype: "f32", shape: [2, 2] }] },
    [pm, conf],
  );
  fs.writeFileSync(path.join(dir, "predict_0_1.bin"), predictPayload);
  const initPayload = encodePayload(
    { msg: "response",
      tensors: [{ name: "pointmap_a", dtype: "f32", shape: [2, 2, 3] },
                { name: "pointmap_b", dtype: "f32", shape: [2, 2, 3] },
                { name: "conf_a", dtype: "f32", shape: [2, 2] },
                { name: "conf_b", dtype: "f32", shape: [2, 2] }] },
    [pm, pm, conf, conf],
  );
  fs.writeFileSync(path.join(dir, "init_pair_0_1.bin"), initPayload);
  return dir;
}

class HostClient {
  readonly proc: ChildProcess;
  private readonly reader = new FrameReader();
  private readonly queue: Buffer[] = [];
  private waiter: ((p: Buffer) => void) | null = null;

  constructor(answersDir: string) {
    this.proc = spawn(process.execPath, [HOST, "--mode", "stub",
                                         "--answers", answersDir]);
    this.proc.stdout!.on("data", (chunk: Buffer) => {
      this.reader.push(chunk, (p) => this.deliver(Buffer.from(p)),
                       () => assert.fail("host sent an oversized frame"));
    });
  }

  private deliver(payload: Buffer) {
    if (this.waiter) {
      const w = this.waiter;
      this.waiter = null;
      w(payload);
    } else {
      this.queue.push(payload);
    }
  }

  sendRaw(bytes: Buffer) {
    this.proc.stdin!.write(bytes);
  }

  send(payload: Buffer) {
    this.sendRaw(frame(payload));
  }

  next(timeoutMs = 5000): Promise<Buffer> {
    if (this.queue.length > 0) return Promise.resolve(this.queue.shift()!);
    return new Promise((resolve, reject) => {
      const timer = setTimeout(() => reject(new Error("timed out")), timeoutMs);
      this.waiter = (p) => {
        clearTimeout(timer);
        resolve(p);
      };
    });
  }

  alive(): boolean {
    return this.proc.exitCode === null && this.proc.signalCode === null;
  }

  stop(): Promise<void> {
    return new Promise((resolve) => {
      this.proc.once("exit", () => resolve());
      this.proc.stdin!.end();
    });
  }
}

let answers: string;

before(() => {
  answers = makeAnswers();
});

after(() => {
  fs.rmSync(answers, { recursive: true, force: true });
});

test("handshake round trips version 1", async () => {
  const client = new HostClient(answers);
  client.send(encodePayload({ msg: "hello", version: 1 }));
  const { header } = decodePayload(await client.next());
  assert.equal(header.msg, "hello");
  assert.equal(header.version, 1);
  await client.stop();
  assert.equal(client.proc.exitCode, 0);
});

test("recorded answers replay bit-exactly", async () => {
  const client = new HostClient(answers);
  client.send(encodePayload({ msg: "predict", ref_view_id: 0, tgt_view_id: 1 }));
  const reply = await client.next();
  assert.deepEqual(reply, fs.readFileSync(path.join(answers, "predict_0_1.bin")));
  client.send(encodePayload({ msg: "init_pair", view_a: 0, view_b: 1 }));
  assert.deepEqual(await client.next(),
                   fs.readFileSync(path.join(answers, "init_pair_0_1.bin")));
  await client.stop();
});

test("unknown pair produces an error frame and the host keeps serving", async () => {
  const client = new HostClient(answers);
  client.send(encodePayload({ msg: "predict", ref_view_id: 7, tgt_view_id: 8 }));
  const { header } = decodePayload(await client.next());
  assert.equal(header.msg, "error");
  assert.ok(client.alive());
  client.send(encodePayload({ msg: "hello", version: 1 }));
  assert.equal(decodePayload(await client.next()).header.msg, "hello");
  await client.stop();
});

test("malformed and fuzzed frames never kill the host", async () => {
  const client = new HostClient(answers);
  // deterministic xorshift so the fuzz corpus is reproducible
  let state = 0x2545f491;
  const rand = () => {
    state ^= state << 13;
    state ^= state >>> 17;
    state ^= state << 5;
    state >>>= 0;
    return state;
  };
  const crafted = [
    Buffer.from("totally not json"),
    Buffer.from("{"),
    Buffer.from('{"msg":42}'),
    Buffer.from('{"msg":"predict"}'),
    Buffer.from('{"msg":"hello","version":99}'),
    Buffer.from('{"msg":"nonsense"}'),
    Buffer.from('{"msg":"x","tensors":[{"name":"t","dtype":"f32","shape":[9999]}]}'),
    Buffer.concat([Buffer.from('{"msg":"x"}'), Buffer.from("trailing")]),
    Buffer.alloc(0),
  ];
  let sent = 0;
  for (let i = 0; i < 200; i++) {
    let payload: Buffer;
    if (i < crafted.length) {
      payload = crafted[i];
    } else {
      const len = rand() % 64;
      payload = Buffer.alloc(len);
      for (let j = 0; j < len; j++) payload[j] = rand() % 256;
    }
    client.send(payload);
    sent++;
  }
  for (let i = 0; i < sent; i++) {
    const { header } = decodePayload(await client.next());
    assert.equal(header.msg, "error");
  }
  assert.ok(client.alive());
  client.send(encodePayload({ msg: "hello", version: 1 }));
  assert.equal(decodePayload(await client.next()).header.msg, "hello");
  await client.stop();
  assert.equal(client.proc.exitCode, 0);
});

test("missing answers directory is a startup usage error", async () => {
  const proc = spawn(process.execPath, [HOST, "--mode", "stub",
                                        "--answers", "/nonexistent-dir"]);
  const code: number = await new Promise((resolve) =>
    proc.once("exit", (c) => resolve(c ?? -1)));
  assert.notEqual(code, 0);
});

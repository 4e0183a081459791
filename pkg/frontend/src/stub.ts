// Recorded-answer store: each file holds one ready-to-send response payload.

import * as fs from "node:fs";
import * as path from "node:path";

export class AnswerStore {
  constructor(private readonly dir: string) {
    if (!fs.existsSync(dir) || !fs.statSync(dir).isDirectory()) {
      throw new Error(`answers directory not found: ${dir}`);
    }
  }

  private load(name: string): Buffer | undefined {
    const file = path.join(this.dir, name);
    if (!fs.existsSync(file)) return undefined;
    return fs.readFileSync(file);
  }

  initPair(viewA: number, viewB: number): Buffer | undefined {
    return this.load(`init_pair_${viewA}_${viewB}.bin`);
  }

  predict(refId: number, tgtId: number): Buffer | undefined {
    return this.load(`predict_${refId}_${tgtId}.bin`);
  }
}

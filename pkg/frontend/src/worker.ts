/**
 * Inference worker: owns the engine so classification never blocks the
 * interaction thread. Messages in: load / classify. Messages out: ready /
 * load-error / result / classify-error. Pixel buffers arrive transferred,
 * not copied.
 */

import { Engine } from "./engine.js";
import { MeldError, parseMeld } from "./meld.js";
import { preprocessRgba } from "./preprocess.js";

export type WorkerRequest =
  | { type: "load"; url: string }
  | {
      type: "classify";
      id: number;
      rgba: ArrayBuffer;
      width: number;
      height: number;
    };

export type WorkerResponse =
  | { type: "ready"; modelName: string; paramCount: number; loadMs: number }
  | { type: "load-error"; message: string }
  | {
      type: "result";
      id: number;
      label: string;
      pBenign: number;
      pMalignant: number;
      inferenceMs: number;
      modelName: string;
    }
  | { type: "classify-error"; id: number; message: string };

const scope = self as unknown as {
  addEventListener(type: "message", listener: (e: MessageEvent) => void): void;
  postMessage(data: WorkerResponse): void;
};

let engine: Engine | null = null;

async function handleLoad(url: string): Promise<WorkerResponse> {
  const started = performance.now();
  let buffer: ArrayBuffer;
  try {
    const response = await fetch(url);
    if (!response.ok) {
      return {
        type: "load-error",
        message: `fetch failed: HTTP ${response.status} for ${url}`,
      };
    }
    buffer = await response.arrayBuffer();
  } catch (err) {
    return { type: "load-error", message: `fetch failed: ${(err as Error).message}` };
  }
  try {
    engine = new Engine(parseMeld(buffer));
  } catch (err) {
    // surfaced verbatim so the page shows exactly what the reader objected to
    const prefix = err instanceof MeldError ? "" : "unexpected: ";
    return { type: "load-error", message: prefix + (err as Error).message };
  }
  return {
    type: "ready",
    modelName: engine.config.name,
    paramCount: engine.bundle.paramCount,
    loadMs: performance.now() - started,
  };
}

function handleClassify(
  req: Extract<WorkerRequest, { type: "classify" }>,
): WorkerResponse {
  if (engine === null) {
    return { type: "classify-error", id: req.id, message: "no model loaded" };
  }
  try {
    const started = performance.now();
    const chw = preprocessRgba(
      new Uint8Array(req.rgba),
      req.width,
      req.height,
      engine.inputSize,
    );
    const outcome = engine.classify(chw);
    return {
      type: "result",
      id: req.id,
      label: outcome.label,
      pBenign: outcome.pBenign,
      pMalignant: outcome.pMalignant,
      inferenceMs: performance.now() - started,
      modelName: engine.config.name,
    };
  } catch (err) {
    return { type: "classify-error", id: req.id, message: (err as Error).message };
  }
}

scope.addEventListener("message", (event) => {
  const req = event.data as WorkerRequest;
  if (req.type === "load") {
    void handleLoad(req.url).then((response) => scope.postMessage(response));
  } else {
    scope.postMessage(handleClassify(req));
  }
});

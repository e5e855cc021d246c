/**
 * Page wiring: drag-and-drop (plus a file picker), a status line that walks
 * idle -> loading -> ready, and a result card. All engine work happens in
 * the worker; this file only decodes dropped files to RGBA and renders
 * state transitions.
 */

import type { WorkerRequest, WorkerResponse } from "./worker.js";
import {
  describeResult,
  formatPercent,
  initialState,
  next,
  type UiState,
} from "./state.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const statusEl = $("status");
const noticeEl = $("notice");
const resultEl = $("result");
const dropZone = $("drop-zone");
const fileInput = $<HTMLInputElement>("file-input");
const weightsInput = $<HTMLInputElement>("weights-url");
const loadButton = $<HTMLButtonElement>("load-button");
const modelMeta = $("model-meta");
const alertToggle = $<HTMLInputElement>("alert-toggle");

const worker = new Worker("./dist/worker.js", { type: "module" });

let state: UiState = initialState;
let dropSeq = 0;

function dispatch(event: Parameters<typeof next>[1]): void {
  state = next(state, event);
  render();
}

function render(): void {
  const phaseText: Record<UiState["phase"], string> = {
    idle: "idle — load a model to begin",
    loading: "loading…",
    ready: "ready",
    classifying: "classifying…",
    error: "error",
  };
  statusEl.textContent = phaseText[state.phase];
  statusEl.dataset.phase = state.phase;
  dropZone.classList.toggle("enabled", state.phase === "ready" || state.phase === "classifying");

  if (state.modelName !== null && state.paramCount !== null) {
    modelMeta.textContent =
      `${state.modelName} · ${state.paramCount.toLocaleString("en-US")} parameters` +
      (state.loadMs !== null ? ` · loaded in ${state.loadMs.toFixed(0)} ms` : "");
  } else {
    modelMeta.textContent = "";
  }

  noticeEl.textContent = state.error ?? state.notice ?? "";
  noticeEl.classList.toggle("error", state.error !== null);

  if (state.result) {
    const r = state.result;
    resultEl.innerHTML = "";
    const verdict = document.createElement("div");
    verdict.className = `verdict ${r.label}`;
    verdict.textContent = r.label;
    const detail = document.createElement("div");
    detail.className = "detail";
    detail.textContent =
      `benign ${formatPercent(r.pBenign)} · malignant ${formatPercent(r.pMalignant)}` +
      ` · ${r.inferenceMs.toFixed(0)} ms · ${r.modelName}`;
    resultEl.append(verdict, detail);
  } else {
    resultEl.textContent = "";
  }
}

worker.addEventListener("message", (event: MessageEvent<WorkerResponse>) => {
  const msg = event.data;
  switch (msg.type) {
    case "ready":
      dispatch({
        type: "load-ok",
        modelName: msg.modelName,
        paramCount: msg.paramCount,
        loadMs: msg.loadMs,
      });
      break;
    case "load-error":
      dispatch({ type: "load-fail", message: msg.message });
      break;
    case "result": {
      const result = {
        label: msg.label,
        pBenign: msg.pBenign,
        pMalignant: msg.pMalignant,
        inferenceMs: msg.inferenceMs,
        modelName: msg.modelName,
      };
      dispatch({ type: "result", result });
      if (alertToggle.checked) {
        window.alert(describeResult(result));
      }
      break;
    }
    case "classify-error":
      dispatch({ type: "classify-fail", message: msg.message });
      break;
  }
});

function post(req: WorkerRequest, transfer: Transferable[] = []): void {
  worker.postMessage(req, transfer);
}

loadButton.addEventListener("click", () => {
  dispatch({ type: "load-start" });
  post({ type: "load", url: weightsInput.value.trim() });
});

async function decodeToRgba(
  file: File,
): Promise<{ rgba: ArrayBuffer; width: number; height: number }> {
  const bitmap = await createImageBitmap(file);
  try {
    const canvas = document.createElement("canvas");
    canvas.width = bitmap.width;
    canvas.height = bitmap.height;
    const ctx = canvas.getContext("2d", { willReadFrequently: true });
    if (!ctx) throw new Error("2d canvas unavailable");
    ctx.drawImage(bitmap, 0, 0);
    const pixels = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
    return { rgba: pixels.data.buffer, width: bitmap.width, height: bitmap.height };
  } finally {
    bitmap.close();
  }
}

async function handleFile(file: File | null | undefined): Promise<void> {
  const isImage = !!file && file.type.startsWith("image/");
  const phaseBefore = state.phase;
  dispatch({ type: "drop", isImage });
  if (!isImage || phaseBefore !== "ready") return;

  const id = ++dropSeq;
  try {
    const { rgba, width, height } = await decodeToRgba(file!);
    post({ type: "classify", id, rgba, width, height }, [rgba]);
  } catch (err) {
    dispatch({ type: "classify-fail", message: `cannot decode image: ${(err as Error).message}` });
  }
}

dropZone.addEventListener("dragover", (event) => {
  event.preventDefault();
  dropZone.classList.add("hover");
});
dropZone.addEventListener("dragleave", () => dropZone.classList.remove("hover"));
dropZone.addEventListener("drop", (event) => {
  event.preventDefault();
  dropZone.classList.remove("hover");
  void handleFile(event.dataTransfer?.files?.[0]);
});
dropZone.addEventListener("click", () => fileInput.click());
fileInput.addEventListener("change", () => {
  void handleFile(fileInput.files?.[0]);
  fileInput.value = "";
});

render();

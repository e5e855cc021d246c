/**
 * UI state machine, kept pure so the flow is unit-testable without a DOM.
 *
 * Phases: idle -> loading -> ready <-> classifying, with error as a
 * recoverable side track (the page stays usable for retry). A drop while
 * classifying is refused with feedback rather than silently lost; a
 * non-image drop never changes phase.
 */

export type Phase = "idle" | "loading" | "ready" | "classifying" | "error";

export interface UiResult {
  label: string;
  pBenign: number;
  pMalignant: number;
  inferenceMs: number;
  modelName: string;
}

export interface UiState {
  phase: Phase;
  modelName: string | null;
  paramCount: number | null;
  loadMs: number | null;
  result: UiResult | null;
  /** inline error text (load or classify failure), shown until the next action */
  error: string | null;
  /** transient feedback ("not an image", "busy"), never a phase change */
  notice: string | null;
}

export type UiEvent =
  | { type: "load-start" }
  | { type: "load-ok"; modelName: string; paramCount: number; loadMs: number }
  | { type: "load-fail"; message: string }
  | { type: "drop"; isImage: boolean }
  | { type: "result"; result: UiResult }
  | { type: "classify-fail"; message: string };

export const initialState: UiState = {
  phase: "idle",
  modelName: null,
  paramCount: null,
  loadMs: null,
  result: null,
  error: null,
  notice: null,
};

export function next(state: UiState, event: UiEvent): UiState {
  switch (event.type) {
    case "load-start":
      return {
        ...initialState,
        phase: "loading",
      };
    case "load-fail":
      return { ...state, phase: "error", error: event.message, notice: null };
    case "load-ok":
      return {
        ...state,
        phase: "ready",
        modelName: event.modelName,
        paramCount: event.paramCount,
        loadMs: event.loadMs,
        error: null,
        notice: null,
      };
    case "drop":
      if (state.phase === "classifying") {
        return { ...state, notice: "busy with the previous image — try again in a moment" };
      }
      if (state.phase !== "ready") {
        return { ...state, notice: "load a model first" };
      }
      if (!event.isImage) {
        return { ...state, notice: "not an image" };
      }
      return { ...state, phase: "classifying", notice: null, error: null };
    case "result":
      if (state.phase !== "classifying") return state;
      return { ...state, phase: "ready", result: event.result, notice: null };
    case "classify-fail":
      if (state.phase !== "classifying") return state;
      return { ...state, phase: "ready", error: event.message, notice: null };
  }
}

/** Percent with one decimal, rounding half-up: 0.8875 -> "88.8%". */
export function formatPercent(p: number): string {
  const scaled = Math.round(p * 1000) / 10;
  return `${scaled.toFixed(1)}%`;
}

export function describeResult(result: UiResult): string {
  return (
    `${result.label} — benign ${formatPercent(result.pBenign)}, ` +
    `malignant ${formatPercent(result.pMalignant)} ` +
    `(${result.inferenceMs.toFixed(0)} ms, ${result.modelName})`
  );
}

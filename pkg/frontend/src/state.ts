// Pure view and session state. Nothing in this module touches the network:
// changing a scale or toggling a channel only re-renders what is already held.

import type { EpochMessage, FramesMessage, LiveMessage, StatusMessage } from "./api";

export interface ViewState {
  windowS: number;
  uvPerDiv: number;
  visibleChannels: string[];
  selectedEpoch: number;
}

export const WINDOW_CHOICES = [5, 10, 30];
export const UV_PER_DIV_CHOICES = [10, 20, 50, 100, 200];

export function initialViewState(): ViewState {
  return { windowS: 10, uvPerDiv: 50, visibleChannels: [], selectedEpoch: 0 };
}

export function setWindow(v: ViewState, windowS: number): ViewState {
  return { ...v, windowS };
}

export function setScale(v: ViewState, uvPerDiv: number): ViewState {
  return { ...v, uvPerDiv };
}

export function toggleChannel(v: ViewState, name: string): ViewState {
  const visible = v.visibleChannels.includes(name)
    ? v.visibleChannels.filter((c) => c !== name)
    : [...v.visibleChannels, name];
  return { ...v, visibleChannels: visible };
}

export function selectEpoch(v: ViewState, index: number, nEpochs: number): ViewState {
  if (nEpochs <= 0) return v;
  const clamped = Math.max(0, Math.min(index, nEpochs - 1));
  return { ...v, selectedEpoch: clamped };
}

// ---------------------------------------------------------------------------
// Live session state, folded from push messages.

export interface SessionState {
  phase: "idle" | "streaming" | "stopped";
  sessionId: string | null;
  epochsCompleted: number;
  delivered: number;
  dropped: number;
  lastFrames: FramesMessage | null;
  lastEpoch: EpochMessage | null;
}

export function initialSessionState(): SessionState {
  return {
    phase: "idle",
    sessionId: null,
    epochsCompleted: 0,
    delivered: 0,
    dropped: 0,
    lastFrames: null,
    lastEpoch: null,
  };
}

function applyStatus(s: SessionState, msg: StatusMessage): SessionState {
  const next: SessionState = {
    ...s,
    phase: msg.state,
    sessionId: msg.session_id,
    epochsCompleted: msg.epochs_completed ?? s.epochsCompleted,
    delivered: msg.delivered ?? s.delivered,
    dropped: msg.dropped ?? s.dropped,
  };
  // A fresh stream starts with a clean slate; stale panels must not linger.
  if (msg.state === "streaming" && s.sessionId !== msg.session_id) {
    next.lastFrames = null;
    next.lastEpoch = null;
    next.epochsCompleted = msg.epochs_completed ?? 0;
  }
  return next;
}

export function applyMessage(s: SessionState, msg: LiveMessage): SessionState {
  switch (msg.type) {
    case "hello":
    case "status":
      return applyStatus(s, msg);
    case "frames":
      return { ...s, lastFrames: msg };
    case "epoch":
      return { ...s, lastEpoch: msg, epochsCompleted: msg.epoch_index + 1 };
  }
}

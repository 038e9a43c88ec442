// Live view: rolling traces, last-four-epochs TFR, periodogram, stage panel,
// and the stimulation form. Panels that describe an epoch swap together, in
// one synchronous block once that epoch's TFR has arrived, so the display
// never mixes epoch n traces with epoch n-1 spectra.

import type { EpochMessage, GatewayClient, LiveMessage } from "./api";
import {
  applyMessage,
  initialSessionState,
  initialViewState,
  type SessionState,
  setScale,
  setWindow,
  toggleChannel,
  UV_PER_DIV_CHOICES,
  type ViewState,
  WINDOW_CHOICES,
} from "./state";
import { drawPeriodogram, drawTfr, periodogramFromTfr, RollingTfr } from "./spectra";
import { drawEnvelope, TraceBuffer } from "./traces";
import { StimulationPanel } from "./stimulation";

const TRACE_W = 760;
const TRACE_H = 72;
const TFR_W = 760;
const TFR_H = 180;
const PSD_W = 760;
const PSD_H = 120;
const MAX_WINDOW_S = 30;

const STAGE_NAMES = ["W", "N1", "N2", "N3", "REM"];

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text !== undefined) node.textContent = text;
  return node;
}

export class LiveView {
  private view: ViewState = initialViewState();
  private session: SessionState = initialSessionState();
  private traces = new TraceBuffer(MAX_WINDOW_S);
  private rolling = new RollingTfr(4);

  private traceColumn: HTMLElement;
  private traceCanvases = new Map<string, HTMLCanvasElement>();
  private channelToggles: HTMLElement;
  private tfrCanvas: HTMLCanvasElement;
  private psdCanvas: HTMLCanvasElement;
  private stageName: HTMLElement;
  private stageMeta: HTMLElement;
  private confRows: HTMLElement;
  private bandsBox: HTMLElement;
  private counters: HTMLElement;
  private startButton: HTMLButtonElement;
  private stopButton: HTMLButtonElement;
  private speedSelect: HTMLSelectElement;
  private scheduleSelect: HTMLSelectElement;
  private modelInput: HTMLInputElement;
  private controlError: HTMLElement;
  readonly stimulation: StimulationPanel;

  constructor(
    root: HTMLElement,
    private client: GatewayClient,
  ) {
    const grid = el("div", { class: "live-grid" });
    root.appendChild(grid);
    const left = el("div");
    const right = el("div");
    grid.appendChild(left);
    grid.appendChild(right);

    // --- session controls ---------------------------------------------
    const controls = el("div", { class: "controls panel" });
    this.startButton = el("button", { class: "action", id: "session-start" }, "start");
    this.stopButton = el("button", { class: "ghost", id: "session-stop" }, "stop");
    this.speedSelect = el("select", { id: "session-speed" });
    for (const s of ["1", "8", "64"]) this.speedSelect.appendChild(el("option", { value: s }, `${s}x`));
    this.speedSelect.value = "8";
    this.scheduleSelect = el("select", { id: "session-schedule" });
    this.scheduleSelect.appendChild(el("option", { value: "night" }, "demo night (8 epochs)"));
    this.scheduleSelect.appendChild(el("option", { value: "n2" }, "N2 x 4"));
    this.modelInput = el("input", {
      id: "session-model",
      type: "text",
      placeholder: "model file on gateway host (optional)",
    });
    this.controlError = el("span", { class: "error-line", id: "session-error" });
    controls.appendChild(this.startButton);
    controls.appendChild(this.stopButton);
    controls.appendChild(this.speedSelect);
    controls.appendChild(this.scheduleSelect);
    controls.appendChild(this.modelInput);
    controls.appendChild(this.controlError);
    left.appendChild(controls);
    this.startButton.addEventListener("click", () => void this.start());
    this.stopButton.addEventListener("click", () => void this.stop());

    // --- view scale controls -------------------------------------------
    const scales = el("div", { class: "controls panel" });
    const windowSelect = el("select", { id: "view-window" });
    for (const w of WINDOW_CHOICES) windowSelect.appendChild(el("option", { value: String(w) }, `${w} s`));
    windowSelect.value = String(this.view.windowS);
    windowSelect.addEventListener("change", () => {
      this.view = setWindow(this.view, Number(windowSelect.value));
      this.repaintTraces();
    });
    const scaleSelect = el("select", { id: "view-scale" });
    for (const u of UV_PER_DIV_CHOICES) scaleSelect.appendChild(el("option", { value: String(u) }, `${u} uV/div`));
    scaleSelect.value = String(this.view.uvPerDiv);
    scaleSelect.addEventListener("change", () => {
      this.view = setScale(this.view, Number(scaleSelect.value));
      this.repaintTraces();
    });
    scales.appendChild(windowSelect);
    scales.appendChild(scaleSelect);
    this.channelToggles = el("span", { id: "channel-toggles" });
    scales.appendChild(this.channelToggles);
    left.appendChild(scales);

    // --- panels ---------------------------------------------------------
    const tracePanel = el("div", { class: "panel" });
    tracePanel.appendChild(el("h2", {}, "traces"));
    this.traceColumn = el("div", { id: "trace-column" });
    tracePanel.appendChild(this.traceColumn);
    left.appendChild(tracePanel);

    const tfrPanel = el("div", { class: "panel" });
    tfrPanel.appendChild(el("h2", {}, "time-frequency (last 4 epochs)"));
    this.tfrCanvas = el("canvas", { id: "live-tfr", width: String(TFR_W), height: String(TFR_H) });
    tfrPanel.appendChild(this.tfrCanvas);
    left.appendChild(tfrPanel);

    const psdPanel = el("div", { class: "panel" });
    psdPanel.appendChild(el("h2", {}, "periodogram"));
    this.psdCanvas = el("canvas", { id: "live-psd", width: String(PSD_W), height: String(PSD_H) });
    psdPanel.appendChild(this.psdCanvas);
    left.appendChild(psdPanel);

    const stagePanel = el("div", { class: "panel stage-panel", id: "stage-panel" });
    this.stageName = el("div", { class: "stage-name", id: "stage-name" }, "--");
    this.stageMeta = el("div", { class: "stage-meta", id: "stage-meta" }, "no epoch yet");
    this.confRows = el("div", { id: "stage-confidences" });
    this.bandsBox = el("div", { id: "stage-bands", class: "stage-meta" });
    this.counters = el("div", { id: "session-counters", class: "stage-meta" });
    stagePanel.appendChild(this.stageName);
    stagePanel.appendChild(this.stageMeta);
    stagePanel.appendChild(this.confRows);
    stagePanel.appendChild(this.bandsBox);
    stagePanel.appendChild(this.counters);
    right.appendChild(stagePanel);

    this.stimulation = new StimulationPanel(client);
    right.appendChild(this.stimulation.root);
  }

  // Rebuild the whole view from gateway state; called on boot so a reload
  // lands in the same place the stream is.
  async resync(): Promise<void> {
    try {
      const status = await this.client.sessionStatus();
      this.session = applyMessage(this.session, { ...status, type: "status" });
      this.renderCounters();
    } catch {
      // gateway not reachable yet; the push channel will catch us up
    }
  }

  handleMessage(msg: LiveMessage): void {
    const before = this.session;
    this.session = applyMessage(this.session, msg);
    if (msg.type === "frames") {
      this.traces.append(msg);
      this.ensureChannelControls(Object.keys(msg.channels));
      this.repaintTraces();
    } else if (msg.type === "epoch") {
      void this.onEpoch(msg);
    } else {
      if (before.sessionId !== this.session.sessionId && this.session.phase === "streaming") {
        this.traces.clear();
        this.rolling.clear();
        this.repaintTraces();
      }
      this.renderCounters();
    }
  }

  private async start(): Promise<void> {
    this.controlError.textContent = "";
    const schedule: [string, number][] =
      this.scheduleSelect.value === "night"
        ? [["W", 1], ["N1", 1], ["N2", 2], ["N3", 2], ["REM", 2]]
        : [["N2", 4]];
    try {
      await this.client.startSession({
        speed: Number(this.speedSelect.value),
        schedule,
        model_file: this.modelInput.value.trim() || null,
      });
    } catch (err) {
      this.controlError.textContent = String(err instanceof Error ? err.message : err);
    }
  }

  private async stop(): Promise<void> {
    this.controlError.textContent = "";
    try {
      await this.client.stopSession();
    } catch (err) {
      this.controlError.textContent = String(err instanceof Error ? err.message : err);
    }
  }

  private ensureChannelControls(names: string[]): void {
    if (this.view.visibleChannels.length === 0 && names.length > 0) {
      this.view = { ...this.view, visibleChannels: names.slice(0, 4) };
    }
    for (const name of names) {
      if (this.traceCanvases.has(name)) continue;
      const lane = el("div");
      lane.appendChild(el("div", { class: "hint" }, name));
      const canvas = el("canvas", {
        width: String(TRACE_W),
        height: String(TRACE_H),
        "data-channel": name,
      });
      lane.appendChild(canvas);
      this.traceColumn.appendChild(lane);
      this.traceCanvases.set(name, canvas);

      const toggle = el("label", { class: "hint" });
      const box = el("input", { type: "checkbox", "data-toggle": name });
      box.checked = this.view.visibleChannels.includes(name);
      box.addEventListener("change", () => {
        this.view = toggleChannel(this.view, name);
        this.repaintTraces();
      });
      toggle.appendChild(box);
      toggle.appendChild(document.createTextNode(name));
      this.channelToggles.appendChild(toggle);
    }
  }

  private repaintTraces(): void {
    for (const [name, canvas] of this.traceCanvases) {
      const visible = this.view.visibleChannels.includes(name);
      const lane = canvas.parentElement;
      if (lane) lane.style.display = visible ? "" : "none";
      if (!visible) continue;
      const ctx = canvas.getContext("2d");
      if (!ctx) continue;
      drawEnvelope(ctx, this.traces.slice(name, this.view.windowS), TRACE_W, TRACE_H, this.view.uvPerDiv);
    }
  }

  // Fetch the epoch's TFR first, then swap every epoch-scoped panel in one
  // synchronous pass.
  private async onEpoch(msg: EpochMessage): Promise<void> {
    let tfr;
    try {
      tfr = await this.client.epochTfr(msg.tfr_ref);
    } catch {
      tfr = null;
    }
    if (tfr) this.rolling.push(msg.epoch_index, tfr);
    const combined = this.rolling.combined();
    const tfrCtx = this.tfrCanvas.getContext("2d");
    if (combined && tfrCtx) drawTfr(tfrCtx, combined, TFR_W, TFR_H);
    const psdCtx = this.psdCanvas.getContext("2d");
    if (tfr && psdCtx) {
      const psd = periodogramFromTfr(tfr);
      drawPeriodogram(psdCtx, psd.frequencies, psd.power, PSD_W, PSD_H);
    }
    this.renderStage(msg);
    this.renderCounters();
  }

  private renderStage(msg: EpochMessage): void {
    this.stageName.textContent = msg.stage ?? "unstaged";
    const ms = msg.analysis_ms.toFixed(1);
    const over = msg.budget_exceeded ? " (over budget)" : "";
    this.stageMeta.textContent = `epoch ${msg.epoch_index} analyzed in ${ms} ms${over}`;
    this.confRows.textContent = "";
    if (msg.confidences) {
      for (const stage of STAGE_NAMES) {
        const p = msg.confidences[stage] ?? 0;
        const row = el("div", { class: "conf-row" });
        row.appendChild(el("span", { class: "hint" }, stage));
        const track = el("div", { class: "bar-track" });
        const fill = el("div", { class: "bar-fill" });
        fill.style.width = `${Math.round(p * 100)}%`;
        track.appendChild(fill);
        row.appendChild(track);
        row.appendChild(el("span", { class: "hint" }, `${(p * 100).toFixed(0)}%`));
        this.confRows.appendChild(row);
      }
    }
    this.bandsBox.textContent = "";
    if (msg.bands) {
      const parts = Object.entries(msg.bands).map(
        ([name, b]) => `${name} ${(b.relative * 100).toFixed(0)}%`,
      );
      this.bandsBox.textContent = parts.join("  ");
    }
  }

  private renderCounters(): void {
    const s = this.session;
    this.counters.textContent =
      `${s.phase}  epochs ${s.epochsCompleted}  delivered ${s.delivered}  dropped ${s.dropped}`;
  }
}

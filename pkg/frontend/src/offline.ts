// Offline viewer: pick an exported session, walk it epoch by epoch. The
// full-night strip doubles as navigation (click a column to jump) and the
// black cursor line always marks the epoch the panels show.

import type { GatewayClient, OfflineEpoch, Tfr } from "./api";
import { columnToEpoch, drawTfr } from "./spectra";
import { drawEnvelope, TraceBuffer } from "./traces";
import { selectEpoch, type ViewState } from "./state";

type OfflineApi = Pick<
  GatewayClient,
  "offlineList" | "offlineTfr" | "offlineHypnogram" | "offlineEpoch"
>;

const STRIP_W = 900;
const STRIP_H = 110;
const TRACE_W = 760;
const TRACE_H = 64;
const EPOCH_TFR_W = 760;
const EPOCH_TFR_H = 150;
const EPOCH_SECONDS = 30;

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

export class OfflineView {
  private sessionList: HTMLElement;
  private stripCanvas: HTMLCanvasElement;
  private prevButton: HTMLButtonElement;
  private nextButton: HTMLButtonElement;
  private whichLabel: HTMLElement;
  private stageLabel: HTMLElement;
  private traceColumn: HTMLElement;
  private epochTfrCanvas: HTMLCanvasElement;
  private legend: HTMLElement;
  private errorLine: HTMLElement;

  private sessionId: string | null = null;
  private nEpochs = 0;
  private nightTfr: Tfr | null = null;
  private view: ViewState = { windowS: EPOCH_SECONDS, uvPerDiv: 50, visibleChannels: [], selectedEpoch: 0 };
  // Serial number for epoch loads so a slow response cannot overwrite a
  // newer selection's panels.
  private loadSeq = 0;

  constructor(
    root: HTMLElement,
    private client: GatewayClient,
  ) {
    const listPanel = el("div", { class: "panel" });
    listPanel.appendChild(el("h2", {}, "exported sessions"));
    this.sessionList = el("div", { class: "session-list", id: "offline-sessions" });
    listPanel.appendChild(this.sessionList);
    root.appendChild(listPanel);

    const stripPanel = el("div", { class: "panel" });
    stripPanel.appendChild(el("h2", {}, "full night"));
    this.stripCanvas = el("canvas", {
      id: "night-strip",
      width: String(STRIP_W),
      height: String(STRIP_H),
    });
    this.stripCanvas.addEventListener("click", (ev) => {
      const rect = this.stripCanvas.getBoundingClientRect();
      const scale = rect.width > 0 ? STRIP_W / rect.width : 1;
      this.jumpTo(columnToEpoch((ev.clientX - rect.left) * scale, STRIP_W, this.nEpochs));
    });
    stripPanel.appendChild(this.stripCanvas);

    const nav = el("div", { class: "epoch-nav" });
    this.prevButton = el("button", { class: "ghost", id: "epoch-prev" }, "prev");
    this.nextButton = el("button", { class: "ghost", id: "epoch-next" }, "next");
    this.whichLabel = el("span", { class: "which", id: "epoch-which" }, "-");
    this.prevButton.addEventListener("click", () => this.jumpTo(this.view.selectedEpoch - 1));
    this.nextButton.addEventListener("click", () => this.jumpTo(this.view.selectedEpoch + 1));
    nav.appendChild(this.prevButton);
    nav.appendChild(this.whichLabel);
    nav.appendChild(this.nextButton);
    stripPanel.appendChild(nav);
    root.appendChild(stripPanel);

    const epochPanel = el("div", { class: "panel" });
    this.stageLabel = el("div", { class: "stage-name", id: "offline-stage" }, "--");
    epochPanel.appendChild(this.stageLabel);
    this.traceColumn = el("div", { id: "offline-traces" });
    epochPanel.appendChild(this.traceColumn);
    this.epochTfrCanvas = el("canvas", {
      id: "offline-tfr",
      width: String(EPOCH_TFR_W),
      height: String(EPOCH_TFR_H),
    });
    epochPanel.appendChild(this.epochTfrCanvas);
    this.legend = el("div", { class: "annotation-legend", id: "annotation-legend" });
    epochPanel.appendChild(this.legend);
    this.errorLine = el("div", { class: "error-line", id: "offline-error" });
    epochPanel.appendChild(this.errorLine);
    root.appendChild(epochPanel);

    this.updateNav();
  }

  async refreshSessions(): Promise<void> {
    this.errorLine.textContent = "";
    let sessions;
    try {
      sessions = await this.client.offlineList();
    } catch (err) {
      this.errorLine.textContent = String(err instanceof Error ? err.message : err);
      return;
    }
    this.sessionList.textContent = "";
    if (sessions.length === 0) {
      this.sessionList.appendChild(el("div", { class: "hint" }, "no exported sessions on the gateway"));
      return;
    }
    for (const s of sessions) {
      const row = el("button", { class: "ghost", "data-session": s.id });
      const epochs = s.n_epochs === null ? "?" : String(s.n_epochs);
      row.textContent = `${s.id} (${epochs} epochs)`;
      if (s.id === this.sessionId) row.classList.add("selected");
      row.addEventListener("click", () => void this.openSession(s.id));
      this.sessionList.appendChild(row);
    }
  }

  async openSession(id: string): Promise<void> {
    this.errorLine.textContent = "";
    try {
      const [tfr, hypnogram] = await Promise.all([
        this.client.offlineTfr(id),
        this.client.offlineHypnogram(id),
      ]);
      this.sessionId = id;
      this.nightTfr = tfr;
      this.nEpochs = hypnogram.epoch_indices.length;
    } catch (err) {
      this.errorLine.textContent = String(err instanceof Error ? err.message : err);
      return;
    }
    for (const node of this.sessionList.querySelectorAll("button")) {
      node.classList.toggle("selected", node.getAttribute("data-session") === id);
    }
    this.view = { ...this.view, selectedEpoch: 0 };
    this.drawStrip();
    this.updateNav();
    await this.loadEpoch(0);
  }

  get selectedEpoch(): number {
    return this.view.selectedEpoch;
  }

  get epochCount(): number {
    return this.nEpochs;
  }

  private jumpTo(index: number): void {
    if (this.sessionId === null || this.nEpochs === 0) return;
    const next = selectEpoch(this.view, index, this.nEpochs);
    if (next.selectedEpoch === this.view.selectedEpoch && index !== this.view.selectedEpoch) {
      // clamped at an edge with nothing to load
      this.updateNav();
      return;
    }
    this.view = next;
    this.drawStrip();
    this.updateNav();
    void this.loadEpoch(this.view.selectedEpoch);
  }

  private updateNav(): void {
    const have = this.sessionId !== null && this.nEpochs > 0;
    this.prevButton.disabled = !have || this.view.selectedEpoch <= 0;
    this.nextButton.disabled = !have || this.view.selectedEpoch >= this.nEpochs - 1;
    this.whichLabel.textContent = have
      ? `epoch ${this.view.selectedEpoch} / ${this.nEpochs - 1}`
      : "-";
  }

  private drawStrip(): void {
    const ctx = this.stripCanvas.getContext("2d");
    if (!ctx || !this.nightTfr) return;
    drawTfr(ctx, this.nightTfr, STRIP_W, STRIP_H, {
      epochIndex: this.view.selectedEpoch,
      nEpochs: this.nEpochs,
    });
  }

  private async loadEpoch(index: number): Promise<void> {
    if (this.sessionId === null) return;
    const seq = ++this.loadSeq;
    let view: OfflineEpoch;
    try {
      view = await this.client.offlineEpoch(this.sessionId, index);
    } catch (err) {
      if (seq === this.loadSeq) {
        this.errorLine.textContent = String(err instanceof Error ? err.message : err);
      }
      return;
    }
    if (seq !== this.loadSeq) return;
    this.errorLine.textContent = "";
    this.renderEpoch(view);
  }

  // All epoch panels update together once the payload is in hand.
  private renderEpoch(view: OfflineEpoch): void {
    this.stageLabel.textContent =
      view.stage === null ? `epoch ${view.epoch_index} (unstaged)` : `epoch ${view.epoch_index}: ${view.stage}`;

    this.traceColumn.textContent = "";
    const buffer = new TraceBuffer(EPOCH_SECONDS);
    buffer.append({
      type: "frames",
      first_sample_index: view.first_sample_index,
      decimation: 0,
      display_rate_hz: view.display_rate_hz,
      channels: view.channels,
    });
    for (const name of Object.keys(view.channels)) {
      const lane = el("div");
      lane.appendChild(el("div", { class: "hint" }, name));
      const canvas = el("canvas", {
        width: String(TRACE_W),
        height: String(TRACE_H),
        "data-offline-channel": name,
      });
      lane.appendChild(canvas);
      this.traceColumn.appendChild(lane);
      const ctx = canvas.getContext("2d");
      if (ctx) {
        drawEnvelope(ctx, buffer.slice(name, EPOCH_SECONDS), TRACE_W, TRACE_H, this.view.uvPerDiv);
      }
    }

    const tfrCtx = this.epochTfrCanvas.getContext("2d");
    if (tfrCtx) drawTfr(tfrCtx, view.tfr, EPOCH_TFR_W, EPOCH_TFR_H);

    this.legend.textContent = "";
    for (const ann of view.annotations) {
      const entry = el("span", { class: "entry" });
      const swatch = el("span", { class: "swatch" });
      swatch.style.background = ann.color;
      entry.appendChild(swatch);
      const marker = ann.failed ? " (failed)" : "";
      entry.appendChild(el("span", {}, `${ann.label}${marker} @${ann.sample_index}`));
      this.legend.appendChild(entry);
    }
    if (view.annotations.length === 0) {
      this.legend.appendChild(el("span", { class: "hint" }, "no markers in this epoch"));
    }
  }
}

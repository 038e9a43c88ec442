// Typed client for the gateway HTTP surface and the /live push channel.
// This module is the only place the app talks to the network.

export interface MinMaxTrace {
  min: number[];
  max: number[];
}

export interface FramesMessage {
  type: "frames";
  first_sample_index: number;
  decimation: number;
  display_rate_hz: number;
  channels: Record<string, MinMaxTrace>;
}

export interface BandSummary {
  power: number;
  relative: number;
}

export interface EpochMessage {
  type: "epoch";
  epoch_index: number;
  first_sample_index: number;
  stage: string | null;
  confidences: Record<string, number> | null;
  bands: Record<string, BandSummary> | null;
  tfr_ref: string;
  dropped_after: number;
  analysis_ms: number;
  budget_exceeded: boolean;
}

export interface StatusMessage {
  type: "status" | "hello";
  state: "idle" | "streaming" | "stopped";
  session_id: string | null;
  epochs_completed?: number;
  delivered?: number;
  dropped?: number;
}

export type LiveMessage = FramesMessage | EpochMessage | StatusMessage;

export interface Tfr {
  times: number[];
  frequencies: number[];
  power: number[][];
}

export interface AnnotationRecord {
  sample_index: number;
  timestamp: string;
  kind: "MANUAL" | "STIMULUS";
  label: string;
  code: number;
  color: string;
  spec: Record<string, unknown> | null;
  failed: boolean;
  roundtrip_ms: number | null;
}

export interface CommandLogRecord {
  receipt_ms: number;
  sample_index: number;
  spec: Record<string, unknown>;
}

export interface SessionConfig {
  policy?: "drop" | "buffer";
  schedule?: [string, number][];
  jitter?: string;
  seed?: number;
  speed?: number;
  model_file?: string | null;
  out_dir?: string | null;
  session_id?: string | null;
}

export interface OfflineSummary {
  id: string;
  n_epochs: number | null;
  decision_path: string | null;
  created: string | null;
}

export interface OfflineEpoch {
  epoch_index: number;
  n_epochs: number;
  first_sample_index: number;
  display_rate_hz: number;
  stage: string | null;
  channels: Record<string, MinMaxTrace>;
  annotations: AnnotationRecord[];
  tfr: Tfr;
}

export interface Hypnogram {
  epoch_indices: number[];
  stages: string[];
  confidences: number[][];
}

export class GatewayError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`gateway ${status}: ${detail}`);
  }
}

// Minimal WebSocket shape so tests can substitute the "ws" package.
export interface SocketLike {
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

export interface LiveSubscription {
  close(): void;
}

export class GatewayClient {
  constructor(
    private base: string,
    private fetchFn: typeof fetch = fetch,
  ) {
    this.base = base.replace(/\/$/, "");
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await this.fetchFn(this.base + path, {
      method,
      headers: body !== undefined ? { "Content-Type": "application/json" } : undefined,
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const parsed = await resp.json();
        if (parsed && typeof parsed.detail === "string") detail = parsed.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new GatewayError(resp.status, detail);
    }
    return resp.json() as Promise<T>;
  }

  sessionStatus(): Promise<StatusMessage & Record<string, unknown>> {
    return this.request("GET", "/session");
  }

  startSession(cfg: SessionConfig): Promise<Record<string, unknown>> {
    return this.request("POST", "/session", cfg);
  }

  stopSession(): Promise<{ session_id: string; written: string[] }> {
    return this.request("DELETE", "/session");
  }

  epochTfr(ref: string): Promise<Tfr> {
    return this.request("GET", ref);
  }

  sessionCommands(): Promise<CommandLogRecord[]> {
    return this.request("GET", "/session/commands");
  }

  postStimulus(spec: Record<string, unknown>): Promise<AnnotationRecord> {
    return this.request("POST", "/stimulus", spec);
  }

  postAnnotation(label: string): Promise<AnnotationRecord> {
    return this.request("POST", "/annotation", { label });
  }

  offlineList(): Promise<OfflineSummary[]> {
    return this.request("GET", "/offline");
  }

  offlineHypnogram(id: string): Promise<Hypnogram> {
    return this.request("GET", `/offline/${id}/hypnogram`);
  }

  offlineEpoch(id: string, index: number): Promise<OfflineEpoch> {
    return this.request("GET", `/offline/${id}/epoch/${index}`);
  }

  // The full-night TFR ships as a float32 blob plus a JSON sidecar.
  async offlineTfr(id: string): Promise<Tfr> {
    const metaResp = await this.fetchFn(`${this.base}/offline/${id}/file/tfr.bin.json`);
    if (!metaResp.ok) throw new GatewayError(metaResp.status, "TFR sidecar missing");
    const meta = await metaResp.json();
    const blobResp = await this.fetchFn(`${this.base}/offline/${id}/file/tfr.bin`);
    if (!blobResp.ok) throw new GatewayError(blobResp.status, "TFR blob missing");
    const raw = new Float32Array(await blobResp.arrayBuffer());
    const [nTimes, nFreqs] = meta.shape as [number, number];
    if (raw.length !== nTimes * nFreqs) {
      throw new GatewayError(500, `TFR blob holds ${raw.length} floats, header says ${nTimes}x${nFreqs}`);
    }
    const power: number[][] = [];
    for (let t = 0; t < nTimes; t += 1) {
      power.push(Array.from(raw.subarray(t * nFreqs, (t + 1) * nFreqs)));
    }
    return { times: meta.times_s, frequencies: meta.frequencies_hz, power };
  }

  // One-directional push channel; reconnects with capped backoff until closed.
  connectLive(
    onMessage: (msg: LiveMessage) => void,
    onState?: (connected: boolean) => void,
    socketFactory?: SocketFactory,
  ): LiveSubscription {
    const factory: SocketFactory =
      socketFactory ?? ((url) => new WebSocket(url) as unknown as SocketLike);
    const url = this.base.replace(/^http/, "ws") + "/live";
    let socket: SocketLike | null = null;
    let closed = false;
    let retryMs = 500;

    const open = () => {
      socket = factory(url);
      socket.onmessage = (ev) => {
        retryMs = 500;
        onState?.(true);
        try {
          onMessage(JSON.parse(String(ev.data)) as LiveMessage);
        } catch {
          // not JSON; nothing we can render
        }
      };
      socket.onclose = () => {
        onState?.(false);
        if (!closed) {
          setTimeout(open, retryMs);
          retryMs = Math.min(retryMs * 2, 8000);
        }
      };
      socket.onerror = () => {
        // onclose follows and handles the retry
      };
    };
    open();

    return {
      close() {
        closed = true;
        socket?.close();
      },
    };
  }
}

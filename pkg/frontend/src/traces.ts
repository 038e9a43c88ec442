// Rolling min/max envelopes for the live trace panel.
//
// The gateway already folds raw samples into display-rate bins; this module
// keeps a bounded history of those bins, re-buckets them for whatever zoom
// the user picked, and paints the envelope. Because every reduction is
// min-of-mins / max-of-maxes, a one-bin spike survives any bucket count.

import type { FramesMessage } from "./api";

export const DISPLAY_RATE_HZ = 64;

export interface Envelope {
  mins: number[];
  maxs: number[];
}

export class TraceBuffer {
  private data = new Map<string, Envelope>();
  private capacity: number;

  constructor(maxWindowS: number) {
    this.capacity = Math.ceil(maxWindowS * DISPLAY_RATE_HZ);
  }

  get channels(): string[] {
    return [...this.data.keys()];
  }

  append(msg: FramesMessage): void {
    for (const [name, trace] of Object.entries(msg.channels)) {
      let env = this.data.get(name);
      if (!env) {
        env = { mins: [], maxs: [] };
        this.data.set(name, env);
      }
      env.mins.push(...trace.min);
      env.maxs.push(...trace.max);
      const excess = env.mins.length - this.capacity;
      if (excess > 0) {
        env.mins.splice(0, excess);
        env.maxs.splice(0, excess);
      }
    }
  }

  clear(): void {
    this.data.clear();
  }

  binCount(name: string): number {
    return this.data.get(name)?.mins.length ?? 0;
  }

  // Last windowS seconds of one channel, oldest bin first.
  slice(name: string, windowS: number): Envelope {
    const env = this.data.get(name);
    if (!env) return { mins: [], maxs: [] };
    const want = Math.ceil(windowS * DISPLAY_RATE_HZ);
    const start = Math.max(0, env.mins.length - want);
    return { mins: env.mins.slice(start), maxs: env.maxs.slice(start) };
  }
}

// Re-bucket an envelope to exactly `buckets` columns. Each output column
// covers a contiguous run of input bins and takes their extreme values, so
// no excursion can vanish no matter how coarse the target is.
export function aggregateMinMax(mins: number[], maxs: number[], buckets: number): Envelope {
  const n = mins.length;
  if (buckets <= 0 || n === 0) return { mins: [], maxs: [] };
  if (buckets >= n) return { mins: [...mins], maxs: [...maxs] };
  const outMins = new Array<number>(buckets);
  const outMaxs = new Array<number>(buckets);
  for (let b = 0; b < buckets; b += 1) {
    const lo = Math.floor((b * n) / buckets);
    const hi = Math.max(lo + 1, Math.floor(((b + 1) * n) / buckets));
    let mn = mins[lo];
    let mx = maxs[lo];
    for (let i = lo + 1; i < hi; i += 1) {
      if (mins[i] < mn) mn = mins[i];
      if (maxs[i] > mx) mx = maxs[i];
    }
    outMins[b] = mn;
    outMaxs[b] = mx;
  }
  return { mins: outMins, maxs: outMaxs };
}

// The slice of CanvasRenderingContext2D the painter needs; tests can hand in
// a recorder instead of a real canvas.
export interface EnvelopePaint {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  clearRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  closePath(): void;
  fill(): void;
  stroke(): void;
}

export const TRACE_DIVISIONS = 6;

// Paint one channel lane. Vertical scale is uvPerDiv per grid division;
// values beyond the lane clip rather than rescale, by design.
export function drawEnvelope(
  ctx: EnvelopePaint,
  env: Envelope,
  width: number,
  height: number,
  uvPerDiv: number,
  color = "#4aa3ff",
): void {
  ctx.clearRect(0, 0, width, height);
  const mid = height / 2;
  const divPx = height / TRACE_DIVISIONS;
  const toY = (uv: number) => {
    const y = mid - (uv / uvPerDiv) * divPx;
    return Math.max(0, Math.min(height, y));
  };

  ctx.strokeStyle = "#2a2e36";
  ctx.lineWidth = 1;
  for (let d = 0; d <= TRACE_DIVISIONS; d += 1) {
    ctx.beginPath();
    ctx.moveTo(0, d * divPx);
    ctx.lineTo(width, d * divPx);
    ctx.stroke();
  }

  const { mins, maxs } = aggregateMinMax(env.mins, env.maxs, Math.max(1, Math.floor(width)));
  if (mins.length === 0) return;
  const dx = width / mins.length;

  ctx.fillStyle = color;
  ctx.beginPath();
  ctx.moveTo(0, toY(maxs[0]));
  for (let i = 1; i < maxs.length; i += 1) ctx.lineTo(i * dx, toY(maxs[i]));
  for (let i = mins.length - 1; i >= 0; i -= 1) ctx.lineTo(i * dx, toY(mins[i]));
  ctx.closePath();
  ctx.fill();

  ctx.strokeStyle = color;
  ctx.lineWidth = 1;
  ctx.beginPath();
  ctx.moveTo(0, toY((mins[0] + maxs[0]) / 2));
  for (let i = 1; i < mins.length; i += 1) {
    ctx.lineTo(i * dx, toY((mins[i] + maxs[i]) / 2));
  }
  ctx.stroke();
}

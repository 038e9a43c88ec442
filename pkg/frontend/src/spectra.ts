// Time-frequency and periodogram drawing for both the live and offline views.
// All geometry helpers are pure so the click-to-epoch mapping and the rolling
// window can be tested without a canvas.

import type { Tfr } from "./api";

// Dark-to-bright heat ramp, anchored at a handful of stops.
const RAMP: [number, [number, number, number]][] = [
  [0.0, [13, 8, 32]],
  [0.25, [81, 18, 124]],
  [0.5, [183, 55, 121]],
  [0.75, [252, 137, 97]],
  [1.0, [252, 255, 164]],
];

export function heatColor(t: number): string {
  const x = Math.max(0, Math.min(1, t));
  for (let i = 1; i < RAMP.length; i += 1) {
    const [t1, c1] = RAMP[i];
    if (x <= t1) {
      const [t0, c0] = RAMP[i - 1];
      const f = t1 === t0 ? 0 : (x - t0) / (t1 - t0);
      const r = Math.round(c0[0] + f * (c1[0] - c0[0]));
      const g = Math.round(c0[1] + f * (c1[1] - c0[1]));
      const b = Math.round(c0[2] + f * (c1[2] - c0[2]));
      return `rgb(${r},${g},${b})`;
    }
  }
  const last = RAMP[RAMP.length - 1][1];
  return `rgb(${last[0]},${last[1]},${last[2]})`;
}

// Keeps the most recent epoch TFRs and presents them as one concatenated
// window, oldest column first. The panel shows at most `maxEpochs` epochs;
// pushing a newer epoch evicts the oldest once the window is full.
export class RollingTfr {
  private entries: { epochIndex: number; tfr: Tfr }[] = [];

  constructor(private maxEpochs = 4) {}

  get epochIndices(): number[] {
    return this.entries.map((e) => e.epochIndex);
  }

  push(epochIndex: number, tfr: Tfr): void {
    this.entries = this.entries.filter((e) => e.epochIndex !== epochIndex);
    this.entries.push({ epochIndex, tfr });
    this.entries.sort((a, b) => a.epochIndex - b.epochIndex);
    while (this.entries.length > this.maxEpochs) this.entries.shift();
  }

  clear(): void {
    this.entries = [];
  }

  combined(): Tfr | null {
    if (this.entries.length === 0) return null;
    const frequencies = this.entries[0].tfr.frequencies;
    const times: number[] = [];
    const power: number[][] = [];
    for (const e of this.entries) {
      times.push(...e.tfr.times);
      power.push(...e.tfr.power);
    }
    return { times, frequencies, power };
  }
}

// Mean power per frequency across the epoch's TFR columns; serves as the
// live periodogram so no second spectral request is needed.
export function periodogramFromTfr(tfr: Tfr): { frequencies: number[]; power: number[] } {
  const nFreqs = tfr.frequencies.length;
  const mean = new Array<number>(nFreqs).fill(0);
  for (const column of tfr.power) {
    for (let f = 0; f < nFreqs; f += 1) mean[f] += column[f];
  }
  const n = Math.max(1, tfr.power.length);
  return { frequencies: tfr.frequencies, power: mean.map((v) => v / n) };
}

// ---------------------------------------------------------------------------
// Full-night strip geometry. The strip maps the whole recording onto `width`
// pixels; these two functions are inverses up to pixel quantization.

export function epochCursorX(epochIndex: number, nEpochs: number, width: number): number {
  if (nEpochs <= 0) return 0;
  return ((epochIndex + 0.5) / nEpochs) * width;
}

export function columnToEpoch(x: number, width: number, nEpochs: number): number {
  if (nEpochs <= 0 || width <= 0) return 0;
  const idx = Math.floor((x / width) * nEpochs);
  return Math.max(0, Math.min(nEpochs - 1, idx));
}

// ---------------------------------------------------------------------------
// Painting. The interfaces cover only what the painters use, so tests can
// record calls without a canvas implementation.

export interface HeatmapPaint {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  stroke(): void;
}

function robustLogBounds(power: number[][]): [number, number] {
  const logs: number[] = [];
  for (const column of power) {
    for (const v of column) logs.push(Math.log10(v + 1e-12));
  }
  if (logs.length === 0) return [0, 1];
  logs.sort((a, b) => a - b);
  const lo = logs[Math.floor(logs.length * 0.05)];
  const hi = logs[Math.min(logs.length - 1, Math.floor(logs.length * 0.95))];
  return hi > lo ? [lo, hi] : [lo, lo + 1];
}

// Low frequency at the bottom, time left to right, log-power color scale.
export function drawTfr(
  ctx: HeatmapPaint,
  tfr: Tfr,
  width: number,
  height: number,
  cursorEpoch?: { epochIndex: number; nEpochs: number },
): void {
  ctx.clearRect(0, 0, width, height);
  const nCols = tfr.power.length;
  const nFreqs = tfr.frequencies.length;
  if (nCols === 0 || nFreqs === 0) return;
  const [lo, hi] = robustLogBounds(tfr.power);
  const cw = width / nCols;
  const chRaw = height / nFreqs;
  for (let c = 0; c < nCols; c += 1) {
    const column = tfr.power[c];
    for (let f = 0; f < nFreqs; f += 1) {
      const t = (Math.log10(column[f] + 1e-12) - lo) / (hi - lo);
      ctx.fillStyle = heatColor(t);
      // rows drawn top-down; highest frequency on top
      const y = height - (f + 1) * chRaw;
      ctx.fillRect(c * cw, y, cw + 0.5, chRaw + 0.5);
    }
  }
  if (cursorEpoch && cursorEpoch.nEpochs > 0) {
    const x = epochCursorX(cursorEpoch.epochIndex, cursorEpoch.nEpochs, width);
    ctx.strokeStyle = "#000000";
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.moveTo(x, 0);
    ctx.lineTo(x, height);
    ctx.stroke();
  }
}

// Log-power polyline over linear frequency.
export function drawPeriodogram(
  ctx: HeatmapPaint,
  frequencies: number[],
  power: number[],
  width: number,
  height: number,
  color = "#4aa3ff",
): void {
  ctx.clearRect(0, 0, width, height);
  if (frequencies.length < 2) return;
  const logs = power.map((v) => Math.log10(v + 1e-12));
  const lo = Math.min(...logs);
  const hi = Math.max(...logs);
  const span = hi > lo ? hi - lo : 1;
  const fMax = frequencies[frequencies.length - 1] || 1;
  ctx.strokeStyle = color;
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  for (let i = 0; i < frequencies.length; i += 1) {
    const x = (frequencies[i] / fMax) * width;
    const y = height - ((logs[i] - lo) / span) * (height - 4) - 2;
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  }
  ctx.stroke();
}

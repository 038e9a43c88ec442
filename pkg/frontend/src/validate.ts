// Client-side mirror of the gateway's stimulus validation, so the form can
// flag a bad field before the request leaves the browser. The server remains
// the authority; these ranges must match what it enforces.

export type Modality = "visual" | "auditory" | "tactile" | "audio_cue";

export interface VisualSpec {
  modality: "visual";
  rgb: [number, number, number];
  intensity: number;
  blink_count: number;
  pattern: "simultaneous" | "alternating";
  on_ms: number;
  off_ms: number;
}

export interface AuditorySpec {
  modality: "auditory";
  volume: number;
  cue_id: number;
  repetitions: number;
}

export interface TactileSpec {
  modality: "tactile";
  strength: number;
  pulse_count: number;
  on_ms: number;
  off_ms: number;
}

export interface AudioCueSpec {
  modality: "audio_cue";
  label: string;
}

export type StimulusSpec = VisualSpec | AuditorySpec | TactileSpec | AudioCueSpec;

export const MODALITIES: Modality[] = ["visual", "auditory", "tactile", "audio_cue"];

// Colors the server assigns to stimulus annotations, one per modality.
export const MODALITY_COLORS: Record<Modality, string> = {
  visual: "#d62728",
  auditory: "#1f77b4",
  tactile: "#2ca02c",
  audio_cue: "#9467bd",
};

function intIn(v: number, lo: number, hi: number): boolean {
  return Number.isInteger(v) && v >= lo && v <= hi;
}

// Returns one message per bad field, keyed by field name; empty means valid.
export function validateSpec(spec: StimulusSpec): Record<string, string> {
  const errors: Record<string, string> = {};
  switch (spec.modality) {
    case "visual":
      if (spec.rgb.length !== 3 || !spec.rgb.every((c) => intIn(c, 0, 255)))
        errors.rgb = "each channel must be 0..255";
      if (!intIn(spec.intensity, 0, 100)) errors.intensity = "must be 0..100";
      if (!intIn(spec.blink_count, 1, 100)) errors.blink_count = "must be 1..100";
      if (spec.pattern !== "simultaneous" && spec.pattern !== "alternating")
        errors.pattern = "unknown pattern";
      if (!intIn(spec.on_ms, 10, 10000)) errors.on_ms = "must be 10..10000 ms";
      if (!intIn(spec.off_ms, 10, 10000)) errors.off_ms = "must be 10..10000 ms";
      break;
    case "auditory":
      if (!intIn(spec.volume, 0, 100)) errors.volume = "must be 0..100";
      if (!intIn(spec.cue_id, 0, 65535)) errors.cue_id = "must be 0..65535";
      if (!intIn(spec.repetitions, 1, 100)) errors.repetitions = "must be 1..100";
      break;
    case "tactile":
      if (!intIn(spec.strength, 0, 100)) errors.strength = "must be 0..100";
      if (!intIn(spec.pulse_count, 1, 100)) errors.pulse_count = "must be 1..100";
      if (!intIn(spec.on_ms, 10, 10000)) errors.on_ms = "must be 10..10000 ms";
      if (!intIn(spec.off_ms, 10, 10000)) errors.off_ms = "must be 10..10000 ms";
      break;
    case "audio_cue": {
      const bytes = new TextEncoder().encode(spec.label).length;
      if (bytes < 1 || bytes > 255) errors.label = "must be 1..255 bytes of UTF-8";
      break;
    }
  }
  return errors;
}

export function defaultSpec(modality: Modality): StimulusSpec {
  switch (modality) {
    case "visual":
      return {
        modality,
        rgb: [255, 0, 0],
        intensity: 100,
        blink_count: 1,
        pattern: "simultaneous",
        on_ms: 500,
        off_ms: 500,
      };
    case "auditory":
      return { modality, volume: 50, cue_id: 0, repetitions: 1 };
    case "tactile":
      return { modality, strength: 50, pulse_count: 1, on_ms: 200, off_ms: 200 };
    case "audio_cue":
      return { modality, label: "cue" };
  }
}

// Stimulus trigger form plus the shared marker history. Field ranges are
// checked as the user types; the trigger button stays disabled while any
// field is out of range, so invalid specs never reach the gateway.

import type { AnnotationRecord, GatewayClient } from "./api";
import {
  defaultSpec,
  MODALITIES,
  type Modality,
  type StimulusSpec,
  validateSpec,
} from "./validate";

type StimulusSender = Pick<GatewayClient, "postStimulus" | "postAnnotation">;

interface FieldDef {
  name: string;
  label: string;
  kind: "number" | "select" | "text";
  options?: string[];
}

const FIELDS: Record<Modality, FieldDef[]> = {
  visual: [
    { name: "r", label: "red", kind: "number" },
    { name: "g", label: "green", kind: "number" },
    { name: "b", label: "blue", kind: "number" },
    { name: "intensity", label: "intensity %", kind: "number" },
    { name: "blink_count", label: "blinks", kind: "number" },
    { name: "pattern", label: "pattern", kind: "select", options: ["simultaneous", "alternating"] },
    { name: "on_ms", label: "on ms", kind: "number" },
    { name: "off_ms", label: "off ms", kind: "number" },
  ],
  auditory: [
    { name: "volume", label: "volume %", kind: "number" },
    { name: "cue_id", label: "cue id", kind: "number" },
    { name: "repetitions", label: "repetitions", kind: "number" },
  ],
  tactile: [
    { name: "strength", label: "strength %", kind: "number" },
    { name: "pulse_count", label: "pulses", kind: "number" },
    { name: "on_ms", label: "on ms", kind: "number" },
    { name: "off_ms", label: "off ms", kind: "number" },
  ],
  audio_cue: [{ name: "label", label: "cue text", kind: "text" }],
};

const HISTORY_LIMIT = 50;

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

export class StimulationPanel {
  readonly root: HTMLElement;
  private fieldBox: HTMLElement;
  private modalitySelect: HTMLSelectElement;
  private triggerButton: HTMLButtonElement;
  private markerInput: HTMLInputElement;
  private markerButton: HTMLButtonElement;
  private historyBox: HTMLElement;
  private errorLine: HTMLElement;
  private inputs = new Map<string, HTMLInputElement | HTMLSelectElement>();
  private errors = new Map<string, HTMLElement>();

  constructor(private sender: StimulusSender) {
    this.root = el("div", { class: "panel", id: "stimulation-panel" });
    this.root.appendChild(el("h2", {}, "stimulation"));

    const modalityRow = el("div", { class: "field-row" });
    modalityRow.appendChild(el("label", { for: "stim-modality" }, "modality"));
    this.modalitySelect = el("select", { id: "stim-modality" });
    for (const m of MODALITIES) {
      this.modalitySelect.appendChild(el("option", { value: m }, m.replace("_", " ")));
    }
    this.modalitySelect.addEventListener("change", () => this.rebuildFields());
    modalityRow.appendChild(this.modalitySelect);
    this.root.appendChild(modalityRow);

    this.fieldBox = el("div", { id: "stim-fields" });
    this.root.appendChild(this.fieldBox);

    this.triggerButton = el("button", { class: "action", id: "stim-trigger" }, "trigger");
    this.triggerButton.addEventListener("click", () => void this.trigger());
    this.root.appendChild(this.triggerButton);

    const markerRow = el("div", { class: "field-row" });
    this.markerInput = el("input", { id: "marker-label", type: "text", placeholder: "manual marker" });
    this.markerButton = el("button", { class: "ghost", id: "marker-send" }, "mark");
    this.markerButton.addEventListener("click", () => void this.mark());
    markerRow.appendChild(this.markerInput);
    markerRow.appendChild(this.markerButton);
    this.root.appendChild(markerRow);

    this.errorLine = el("div", { class: "error-line", id: "stim-error" });
    this.root.appendChild(this.errorLine);

    this.root.appendChild(el("h2", {}, "markers"));
    this.historyBox = el("div", { class: "history", id: "stim-history" });
    this.root.appendChild(this.historyBox);

    this.rebuildFields();
  }

  get modality(): Modality {
    return this.modalitySelect.value as Modality;
  }

  setModality(m: Modality): void {
    this.modalitySelect.value = m;
    this.rebuildFields();
  }

  private rebuildFields(): void {
    this.fieldBox.textContent = "";
    this.inputs.clear();
    this.errors.clear();
    const defaults = defaultSpec(this.modality) as unknown as Record<string, unknown>;
    for (const def of FIELDS[this.modality]) {
      const row = el("div", { class: "field-row" });
      row.appendChild(el("label", { for: `stim-${def.name}` }, def.label));
      let input: HTMLInputElement | HTMLSelectElement;
      if (def.kind === "select") {
        input = el("select", { id: `stim-${def.name}` });
        for (const opt of def.options ?? []) input.appendChild(el("option", { value: opt }, opt));
      } else {
        input = el("input", { id: `stim-${def.name}`, type: def.kind });
      }
      const dflt = this.defaultFor(def.name, defaults);
      if (dflt !== undefined) input.value = dflt;
      input.addEventListener("input", () => this.refreshValidity());
      row.appendChild(input);
      const err = el("span", { class: "field-error", "data-error-for": def.name });
      row.appendChild(err);
      this.fieldBox.appendChild(row);
      this.inputs.set(def.name, input);
      this.errors.set(def.name, err);
    }
    this.refreshValidity();
  }

  private defaultFor(name: string, defaults: Record<string, unknown>): string | undefined {
    if (name === "r" || name === "g" || name === "b") {
      const rgb = defaults.rgb as number[];
      return String(rgb["rgb".indexOf(name)]);
    }
    const v = defaults[name];
    return v === undefined ? undefined : String(v);
  }

  // Assemble the spec from the form as typed; out-of-range values pass
  // through so validateSpec can name them.
  readSpec(): StimulusSpec {
    const num = (name: string) => {
      const raw = this.inputs.get(name)?.value ?? "";
      return raw.trim() === "" ? NaN : Number(raw);
    };
    const str = (name: string) => this.inputs.get(name)?.value ?? "";
    switch (this.modality) {
      case "visual":
        return {
          modality: "visual",
          rgb: [num("r"), num("g"), num("b")],
          intensity: num("intensity"),
          blink_count: num("blink_count"),
          pattern: str("pattern") as "simultaneous" | "alternating",
          on_ms: num("on_ms"),
          off_ms: num("off_ms"),
        };
      case "auditory":
        return {
          modality: "auditory",
          volume: num("volume"),
          cue_id: num("cue_id"),
          repetitions: num("repetitions"),
        };
      case "tactile":
        return {
          modality: "tactile",
          strength: num("strength"),
          pulse_count: num("pulse_count"),
          on_ms: num("on_ms"),
          off_ms: num("off_ms"),
        };
      case "audio_cue":
        return { modality: "audio_cue", label: str("label") };
    }
  }

  private refreshValidity(): Record<string, string> {
    const errors = validateSpec(this.readSpec());
    for (const [name, box] of this.errors) {
      // rgb errors land on whichever color inputs exist
      const key = name === "r" || name === "g" || name === "b" ? "rgb" : name;
      box.textContent = errors[key] ?? "";
    }
    this.triggerButton.disabled = Object.keys(errors).length > 0;
    return errors;
  }

  private async trigger(): Promise<void> {
    if (Object.keys(this.refreshValidity()).length > 0) return;
    this.errorLine.textContent = "";
    try {
      const record = await this.sender.postStimulus(
        this.readSpec() as unknown as Record<string, unknown>,
      );
      this.addRecord(record);
    } catch (err) {
      this.errorLine.textContent = String(err instanceof Error ? err.message : err);
    }
  }

  private async mark(): Promise<void> {
    const label = this.markerInput.value.trim();
    if (!label) return;
    this.errorLine.textContent = "";
    try {
      const record = await this.sender.postAnnotation(label);
      this.markerInput.value = "";
      this.addRecord(record);
    } catch (err) {
      this.errorLine.textContent = String(err instanceof Error ? err.message : err);
    }
  }

  // History rows carry the server's color and timestamp, not local guesses.
  addRecord(record: AnnotationRecord): void {
    const entry = el("div", { class: "entry" });
    const swatch = el("span", { class: "swatch" });
    swatch.style.background = record.color;
    entry.appendChild(swatch);
    const text = record.kind === "STIMULUS" ? `${record.label}${record.failed ? " (failed)" : ""}` : record.label;
    entry.appendChild(el("span", {}, text));
    const rt = record.roundtrip_ms === null ? "" : ` ${record.roundtrip_ms.toFixed(2)} ms`;
    entry.appendChild(el("span", { class: "when" }, `@${record.sample_index}${rt}`));
    this.historyBox.prepend(entry);
    while (this.historyBox.childElementCount > HISTORY_LIMIT) {
      this.historyBox.lastElementChild?.remove();
    }
  }

  clearHistory(): void {
    this.historyBox.textContent = "";
  }
}

// DOM wiring: reads the form, drives the controller, renders its state.
// All screening math lives in the service; this file only moves strings.

import { ApiClient } from "./api.js";
import { ScreeningController, type UiState } from "./state.js";
import { buildResultView } from "./view.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function render(state: UiState): void {
  const submit = el<HTMLButtonElement>("submit");
  submit.disabled = !state.canSubmit;
  submit.textContent = state.phase === "submitting" ? "Screening…" : "Run screening";

  const fileStatus = el<HTMLElement>("file-status");
  if (state.subjectError) {
    fileStatus.textContent = state.subjectError;
    fileStatus.className = "file-status invalid";
  } else if (state.subject) {
    const poseCount = Object.keys(state.subject.poses).length;
    fileStatus.textContent = `${state.subjectFileName}: ${poseCount} pose embedding(s)`;
    fileStatus.className = "file-status ok";
  } else {
    fileStatus.textContent = "no file selected";
    fileStatus.className = "file-status";
  }

  const banner = el<HTMLElement>("error-banner");
  if (state.errorMessage) {
    banner.hidden = false;
    el<HTMLElement>("error-message").textContent = state.errorMessage;
  } else {
    banner.hidden = true;
  }

  const kbSelect = el<HTMLSelectElement>("kb-select");
  if (kbSelect.options.length !== state.catalog.length) {
    kbSelect.innerHTML = "";
    for (const kb of state.catalog) {
      const option = document.createElement("option");
      option.value = kb.name;
      option.textContent = `${kb.name} (${kb.count} subjects, ${kb.metric})`;
      kbSelect.appendChild(option);
    }
  }
  if (state.activeKb) {
    kbSelect.value = state.activeKb;
    el<HTMLElement>("active-kb").textContent = `active knowledge base: ${state.activeKb}`;
  }

  const panel = el<HTMLElement>("result-panel");
  if (state.phase !== "showing" || !state.result) {
    panel.hidden = state.result === null;
    return;
  }
  panel.hidden = false;
  const view = buildResultView(state.result);

  const decision = el<HTMLElement>("decision-banner");
  decision.textContent = view.decisionLabel;
  decision.className = `decision ${view.decision}`;

  el<HTMLElement>("fused-prob").textContent = view.fusedProbabilityDisplay;
  el<HTMLElement>("threshold").textContent = view.thresholdDisplay;
  el<HTMLElement>("gat-prob").textContent = view.gatProbabilityDisplay;
  el<HTMLElement>("retrieved-score").textContent = view.retrievedScoreDisplay;
  el<HTMLElement>("alpha-cls").textContent = view.alphaClsDisplay;
  el<HTMLElement>("alpha-reg").textContent = view.alphaRegDisplay;
  el<HTMLElement>("mean-distance").textContent = view.meanDistanceDisplay;

  const measurements = el<HTMLElement>("measurements");
  measurements.innerHTML = "";
  for (const m of view.measurements) {
    const row = document.createElement("div");
    row.className = "measurement";
    row.innerHTML = `<span class="label"></span><span class="value"></span>`;
    (row.querySelector(".label") as HTMLElement).textContent = m.label;
    (row.querySelector(".value") as HTMLElement).textContent = m.display;
    measurements.appendChild(row);
  }

  const tbody = el<HTMLElement>("neighbor-rows");
  tbody.innerHTML = "";
  for (const n of view.neighbors) {
    const tr = document.createElement("tr");
    for (const text of [
      n.id,
      n.distanceDisplay,
      n.hasClassLabel ? "yes" : "no",
      n.hasAnthro ? "yes" : "no",
    ]) {
      const td = document.createElement("td");
      td.textContent = text;
      tr.appendChild(td);
    }
    tbody.appendChild(tr);
  }
}

function start(): void {
  const controller = new ScreeningController(new ApiClient(), render);

  el<HTMLInputElement>("age").addEventListener("input", (event) => {
    controller.setAge((event.target as HTMLInputElement).value);
  });

  el<HTMLInputElement>("subject-file").addEventListener("change", async (event) => {
    const input = event.target as HTMLInputElement;
    const file = input.files?.[0];
    if (!file) {
      return;
    }
    controller.setSubjectFile(file.name, await file.text());
  });

  el<HTMLFormElement>("screening-form").addEventListener("submit", (event) => {
    event.preventDefault();
    void controller.submit();
  });

  el<HTMLSelectElement>("kb-select").addEventListener("change", (event) => {
    void controller.selectKb((event.target as HTMLSelectElement).value);
  });

  el<HTMLButtonElement>("dismiss-error").addEventListener("click", () => {
    controller.dismissError();
  });

  render(controller.state);
  void controller.refreshCatalog();
}

document.addEventListener("DOMContentLoaded", start);

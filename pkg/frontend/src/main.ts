import { AdminApi } from "./api.js";
import { renderApps, renderDetections, renderError, renderSummary, renderWhitelist } from "./render.js";
import { Controller } from "./state.js";
import type { Label } from "./types.js";

const api = new AdminApi("");
const controller = new Controller(api);

type Tab = "summary" | "apps" | "whitelist";
let activeTab: Tab = "summary";

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing #${id}`);
  }
  return node;
}

function renderAll(): void {
  const { state } = controller;
  el("error").innerHTML = renderError(state.error);
  for (const tab of ["summary", "apps", "whitelist"] as const) {
    el(`tab-${tab}`).classList.toggle("active", tab === activeTab);
    el(`view-${tab}`).style.display = tab === activeTab ? "block" : "none";
  }
  el("view-summary").innerHTML = renderSummary(state.summary);
  el("view-apps").innerHTML =
    renderApps(state.apps) +
    `<div id="drilldown">${renderDetections(state.selectedApp, state.detections)}</div>`;
  el("view-whitelist").innerHTML = renderWhitelist(state.whitelist);
}

function wireEvents(): void {
  for (const tab of ["summary", "apps", "whitelist"] as const) {
    el(`tab-${tab}`).addEventListener("click", () => {
      activeTab = tab;
      renderAll();
    });
  }
  document.body.addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    if (target.id === "retry") {
      void controller.refresh();
      return;
    }
    const appRow = target.closest<HTMLElement>("tr.app-row");
    if (appRow?.dataset.app) {
      controller.selectApp(appRow.dataset.app);
      return;
    }
    if (target.matches("button.mark")) {
      void controller.mark(target.dataset.id ?? "", target.dataset.label as Label);
      return;
    }
    if (target.matches("button.filter")) {
      void controller.toggleFilter(target.dataset.id ?? "", target.dataset.enabled === "true");
    }
  });
}

controller.onChange(renderAll);
wireEvents();
controller.start();

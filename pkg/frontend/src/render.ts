// Pure HTML renderers; no state, no fetches. Everything user-controlled
// (key names, value previews) is escaped before insertion.

import type { AppRow, DetectionView, Summary, WhitelistView } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

function probability(value: number | null): string {
  return value === null ? "–" : value.toFixed(3);
}

export function renderSummary(summary: Summary | null): string {
  if (!summary) {
    return `<p class="dim">Waiting for the proxy…</p>`;
  }
  const cards: [string, number][] = [
    ["apps monitored", summary.apps_monitored],
    ["values sent", summary.values_sent],
    ["PII detected", summary.pii_detected],
    ["hosts contacted", summary.hosts_contacted],
    ["requests seen", summary.requests_seen],
    ["requests bypassed", summary.requests_bypassed],
  ];
  const items = cards
    .map(
      ([label, value]) =>
        `<div class="card"><div class="count">${value}</div><div class="label">${label}</div></div>`,
    )
    .join("");
  return `<div class="cards">${items}</div>`;
}

export function renderApps(apps: AppRow[]): string {
  if (apps.length === 0) {
    return `<p class="dim">No traffic observed yet.</p>`;
  }
  const rows = apps
    .map((app) => {
      const badges = [
        app.on_fastpath ? `<span class="badge">fastpath</span>` : "",
        app.whitelisted ? `<span class="badge">whitelisted</span>` : "",
        app.pinning_suspected > 0 ? `<span class="badge warn">pinned</span>` : "",
      ].join("");
      return (
        `<tr class="app-row" data-app="${escapeHtml(app.app)}">` +
        `<td>${escapeHtml(app.app)} <span class="dim">${escapeHtml(app.version)}</span>${badges}</td>` +
        `<td class="num">${app.requests_seen}</td>` +
        `<td class="num">${app.detections}</td>` +
        `<td class="num">${app.pii_values}</td></tr>`
      );
    })
    .join("");
  return (
    `<table><thead><tr><th>app</th><th class="num">requests</th>` +
    `<th class="num">flagged keys</th><th class="num">PII values</th></tr></thead>` +
    `<tbody>${rows}</tbody></table>`
  );
}

export function renderDetections(appPackage: string | null, detections: DetectionView[]): string {
  if (appPackage === null) {
    return "";
  }
  if (detections.length === 0) {
    return `<p class="dim">No flagged key-value pairs for ${escapeHtml(appPackage)} yet.</p>`;
  }
  const rows = detections
    .map((det) => {
      const values = det.values.map((v) => `<code>${escapeHtml(v)}</code>`).join(" ");
      const crash =
        det.status === "CrashSuspected"
          ? `<span class="badge warn" title="filtering this pair appears to break the app">crash?</span>`
          : det.status === "Whitelisted"
            ? `<span class="badge">crash-whitelisted</span>`
            : "";
      const marks = (["pii", "not_pii", "unsure"] as const)
        .map(
          (label) =>
            `<button class="mark ${det.label === label ? "active" : ""}" ` +
            `data-id="${det.id}" data-label="${label}">${label.replace("_", " ")}</button>`,
        )
        .join("");
      const filterToggle =
        `<button class="filter ${det.filter_enabled ? "active" : ""}" data-id="${det.id}" ` +
        `data-enabled="${det.filter_enabled ? "false" : "true"}">` +
        `${det.filter_enabled ? "filtering on" : "filtering off"}</button>`;
      return (
        `<tr data-id="${det.id}">` +
        `<td><code>${escapeHtml(det.key)}</code><br><span class="dim">${escapeHtml(det.sid.method)} ${escapeHtml(det.sid.host)}${escapeHtml(det.sid.path)}</span></td>` +
        `<td>${values}</td>` +
        `<td>${escapeHtml(det.verdict)} ${crash}<br><span class="dim">p_priv ${probability(det.p_private)} · p_pub ${probability(det.p_public)}</span></td>` +
        `<td>${marks}</td><td>${filterToggle}</td></tr>`
      );
    })
    .join("");
  return (
    `<table><thead><tr><th>key</th><th>last values</th><th>verdict</th>` +
    `<th>your label</th><th>filter</th></tr></thead><tbody>${rows}</tbody></table>`
  );
}

export function renderWhitelist(view: WhitelistView | null): string {
  if (!view) {
    return `<p class="dim">Not synced yet.</p>`;
  }
  const apps =
    view.apps.length === 0
      ? `<p class="dim">No server-whitelisted apps.</p>`
      : `<ul>${view.apps
          .map(([app, version]) => `<li><code>${escapeHtml(app)}</code> ${escapeHtml(version)}</li>`)
          .join("")}</ul>`;
  const pairs =
    view.crash_pairs.length === 0
      ? `<p class="dim">No crash-whitelisted pairs.</p>`
      : `<ul>${view.crash_pairs
          .map(
            (pair) =>
              `<li><code>${escapeHtml(pair.key)}</code> on ` +
              `${escapeHtml(pair.sid.host)}${escapeHtml(pair.sid.path)}</li>`,
          )
          .join("")}</ul>`;
  const synced =
    view.fetched_at > 0 ? new Date(view.fetched_at * 1000).toLocaleString() : "never";
  return (
    `<h3>Server whitelist</h3>${apps}` +
    `<h3>Crash whitelist (exempt from scrubbing)</h3>${pairs}` +
    `<p class="dim">last synced: ${synced}</p>`
  );
}

export function renderError(error: string | null): string {
  if (!error) {
    return "";
  }
  return (
    `<div class="banner">admin API error: ${escapeHtml(error)} ` +
    `<button id="retry">retry</button></div>`
  );
}

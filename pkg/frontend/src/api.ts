// Thin typed client for the proxy admin API. The dashboard does no
// computation of its own: every number shown comes from these responses.

import type { AppRow, DetectionView, Label, Summary, WhitelistView } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

async function asJson<T>(response: Response): Promise<T> {
  const body = await response.json().catch(() => null);
  if (!response.ok) {
    const detail =
      body && typeof body === "object" && "error" in (body as Record<string, unknown>)
        ? String((body as Record<string, unknown>).error)
        : response.statusText;
    throw new ApiError(response.status, detail);
  }
  return body as T;
}

export class AdminApi {
  constructor(private baseUrl: string = "") {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  async summary(): Promise<Summary> {
    return asJson<Summary>(await fetch(this.url("/admin/api/summary")));
  }

  async apps(): Promise<AppRow[]> {
    const body = await asJson<{ apps: AppRow[] }>(await fetch(this.url("/admin/api/apps")));
    return body.apps;
  }

  async detections(appPackage: string): Promise<DetectionView[]> {
    const body = await asJson<{ detections: DetectionView[] }>(
      await fetch(this.url(`/admin/api/apps/${encodeURIComponent(appPackage)}/detections`)),
    );
    return body.detections;
  }

  async mark(detectionId: string, label: Label): Promise<DetectionView> {
    const body = await asJson<{ detection: DetectionView }>(
      await fetch(this.url(`/admin/api/detections/${detectionId}/mark`), {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ label }),
      }),
    );
    return body.detection;
  }

  async setFilter(detectionId: string, enabled: boolean): Promise<DetectionView> {
    const body = await asJson<{ detection: DetectionView }>(
      await fetch(this.url(`/admin/api/detections/${detectionId}/filter`), {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ enabled }),
      }),
    );
    return body.detection;
  }

  async whitelist(): Promise<WhitelistView> {
    return asJson<WhitelistView>(await fetch(this.url("/admin/api/whitelist")));
  }
}

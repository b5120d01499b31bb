// Polling store with optimistic labeling.
//
// The proxy is the source of truth; the store refreshes every poll tick and
// after every mutation. Mark/toggle updates apply to the local copy first so
// the UI feels immediate, then roll back if the API refuses (e.g. relabeling
// while the filter is still armed).

import { AdminApi, ApiError } from "./api.js";
import type { AppRow, DetectionView, Label, Summary, WhitelistView } from "./types.js";

export interface DashboardState {
  summary: Summary | null;
  apps: AppRow[];
  selectedApp: string | null;
  detections: DetectionView[];
  whitelist: WhitelistView | null;
  error: string | null;
  lastUpdated: number;
}

export type Listener = (state: DashboardState) => void;

export const POLL_INTERVAL_MS = 2000;

export class Controller {
  readonly state: DashboardState = {
    summary: null,
    apps: [],
    selectedApp: null,
    detections: [],
    whitelist: null,
    error: null,
    lastUpdated: 0,
  };

  private listeners: Listener[] = [];
  private timer: ReturnType<typeof setInterval> | null = null;
  // mutations on one detection are serialized; refreshes wait for them
  private pending: Promise<unknown> = Promise.resolve();

  constructor(
    private api: AdminApi,
    private pollIntervalMs: number = POLL_INTERVAL_MS,
  ) {}

  onChange(listener: Listener): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }

  start(): void {
    if (this.timer !== null) {
      return;
    }
    void this.refresh();
    this.timer = setInterval(() => void this.refresh(), this.pollIntervalMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  selectApp(appPackage: string | null): void {
    this.state.selectedApp = appPackage;
    this.state.detections = [];
    void this.refresh();
  }

  async refresh(): Promise<void> {
    await this.pending.catch(() => undefined);
    try {
      const [summary, apps, whitelist] = await Promise.all([
        this.api.summary(),
        this.api.apps(),
        this.api.whitelist(),
      ]);
      this.state.summary = summary;
      this.state.apps = apps;
      this.state.whitelist = whitelist;
      if (this.state.selectedApp !== null) {
        this.state.detections = await this.api.detections(this.state.selectedApp);
      }
      this.state.error = null;
      this.state.lastUpdated = Date.now();
    } catch (err) {
      this.state.error = err instanceof Error ? err.message : String(err);
    }
    this.emit();
  }

  private findDetection(id: string): DetectionView | undefined {
    return this.state.detections.find((d) => d.id === id);
  }

  async mark(id: string, label: Label): Promise<boolean> {
    const detection = this.findDetection(id);
    const before = detection ? { label: detection.label, filter_enabled: detection.filter_enabled } : null;
    if (detection) {
      detection.label = label;
      this.emit();
    }
    const action = this.api.mark(id, label).then(
      (fresh) => {
        if (detection) Object.assign(detection, fresh);
        this.state.error = null;
        this.emit();
        return true;
      },
      (err: unknown) => {
        if (detection && before) Object.assign(detection, before);
        this.state.error = err instanceof ApiError ? err.message : String(err);
        this.emit();
        return false;
      },
    );
    this.pending = action;
    return action;
  }

  async toggleFilter(id: string, enabled: boolean): Promise<boolean> {
    const detection = this.findDetection(id);
    const before = detection ? { filter_enabled: detection.filter_enabled } : null;
    if (detection) {
      detection.filter_enabled = enabled;
      this.emit();
    }
    const action = this.api.setFilter(id, enabled).then(
      (fresh) => {
        if (detection) Object.assign(detection, fresh);
        this.state.error = null;
        this.emit();
        return true;
      },
      (err: unknown) => {
        if (detection && before) Object.assign(detection, before);
        this.state.error = err instanceof ApiError ? err.message : String(err);
        this.emit();
        return false;
      },
    );
    this.pending = action;
    return action;
  }
}

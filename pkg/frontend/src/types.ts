export interface SidView {
  package: string;
  version: string;
  method: string;
  host: string;
  path: string;
}

export interface Summary {
  apps_monitored: number;
  values_sent: number;
  pii_detected: number;
  hosts_contacted: number;
  requests_seen: number;
  requests_bypassed: number;
}

export interface AppRow {
  app: string;
  version: string;
  requests_seen: number;
  protocols: Record<string, number>;
  detections: number;
  pii_values: number;
  on_fastpath: boolean;
  whitelisted: boolean;
  pinning_suspected: number;
}

export type Label = "pii" | "not_pii" | "unsure";

export interface DetectionView {
  id: string;
  app: string;
  version: string;
  sid: SidView;
  key: string;
  verdict: string;
  p_private: number;
  p_public: number | null;
  values: string[];
  unique_values: number;
  count: number;
  first_ts: number;
  last_ts: number;
  label: Label;
  filter_enabled: boolean;
  status: "Active" | "CrashSuspected" | "Whitelisted";
}

export interface WhitelistView {
  apps: [string, string][];
  crash_pairs: { sid: SidView; key: string }[];
  fetched_at: number;
}

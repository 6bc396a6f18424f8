/**
 * Gateway wire schema.
 *
 * The console consumes the gateway verbatim and nothing else:
 *   stream line    {"type": kind, "seq": n, "payload": {"t": ..., ...}}
 *   transcript line {"seq": n, "t": ..., "kind": ..., "data": {...}}
 *   GET  /snapshot /recommendation /transcript /stream
 *   POST /command  {"command": ..., "speed"?}
 *
 * All numeric payloads are SI / degC; failed sensor channels arrive as
 * null, never NaN.
 */

export type Phase =
  | "steady"
  | "transient"
  | "paused"
  | "post-action"
  | "terminated";

export type CommandName =
  | "accept"
  | "reject"
  | "scram"
  | "pause"
  | "resume"
  | "set-speed";

/** One line of GET /stream. */
export interface StreamEvent {
  type: string;
  seq: number;
  payload: Record<string, unknown> & { t?: number };
}

/** One line of GET /transcript (and of a saved run file). */
export interface TranscriptEvent {
  seq: number;
  t: number;
  kind: string;
  data: Record<string, unknown>;
}

// ---------------------------------------------------------------------------
// Event payloads (field names exactly as the gateway emits them).

export interface TickPayload {
  t: number;
  sensors: (number | null)[];
  t_pfcl: number; // ground truth, exposed for demo mode only
  power: number;
  w_1: number;
  w_2: number;
  diagnosed: number | null;
  scrammed: boolean;
}

export interface SteadyPayload {
  t: number;
  temperatures: Record<string, number>;
  t_pfcl: number;
  power: number;
}

export interface FaultPayload {
  t: number;
  w1_end: number;
  ramp_duration: number;
  coastdown_rate: number;
}

export interface SensorPayload {
  t: number;
  values: (number | null)[];
  valid: boolean[];
  true_t_pfcl: number;
  diagnosed?: number | null; // present on post-decision samples only
}

export interface DiagnosisPayload {
  t: number;
  estimate: number;
  true: number;
  gradients: number[];
  window_max_abs_error: number;
}

export interface AssessmentPayload {
  t: number;
  limit: number;
  w2_end: number[];
  t_trip: number[];
  prediction: number[];
  margin: number[];
  safe: boolean[];
}

export interface RecommendationPayload {
  t: number;
  scram: boolean;
  reason: string;
  text: string;
  w2_end: number | null;
  t_trip: number | null;
  immediate: boolean | null;
  prediction: number | null;
  margin: number | null;
}

export interface DecisionPayload {
  t: number;
  policy: string;
  verdict: "accept" | "reject" | "scram";
}

export interface TripPayload {
  t: number;
  w2_end: number;
  t_trip: number;
  diagnosed: number;
  true: number;
}

export interface CheckPayload {
  t: number;
  observed_peak: number;
  predicted_peak: number;
  verdict: "ok" | "anomaly";
  threshold: number;
}

export interface ScramPayload {
  t: number;
  reason: string;
}

export interface OutcomePayload {
  t: number;
  grade: 0 | 1 | 2;
  max_true_t_pfcl: number;
  max_diagnosed_t_pfcl: number | null;
  limit: number;
  scrammed: boolean;
  action_taken: boolean;
  policy: string;
}

// ---------------------------------------------------------------------------
// REST bodies.

export interface Snapshot {
  session: {
    phase: Phase;
    policy: string;
    speed: number;
    paused_by_operator: boolean;
    awaiting_decision: boolean;
  };
  scenario: {
    w1_end: number;
    ramp_duration: number;
    t_acc: number;
    coastdown_rate: number;
  };
  timeline: {
    steady_wait: number;
    accident_time: number;
    recommend_time: number;
  };
  bundle: {
    config_hash: string;
    limit: number;
    grid_n: number;
    bounds: [number, number, number, number]; // w2 min/max, trip min/max
  };
  channels: string[];
  plant: Partial<TickPayload>;
  recommendation: (RecommendationPayload & { t: number }) | null;
  outcome: (OutcomePayload & { t: number }) | null;
}

export interface RecommendationResponse {
  recommendation: RecommendationPayload;
  table: AssessmentPayload;
}

export interface CommandResult {
  ok: boolean;
  queued?: string;
  error?: string;
}

// ---------------------------------------------------------------------------
// Parsing helpers.

export function parseStreamLine(line: string): StreamEvent {
  const obj = JSON.parse(line) as Record<string, unknown>;
  if (typeof obj.type !== "string" || typeof obj.seq !== "number" ||
      typeof obj.payload !== "object" || obj.payload === null) {
    throw new Error(`not a stream event: ${line.slice(0, 80)}`);
  }
  return obj as unknown as StreamEvent;
}

export function parseTranscriptLine(line: string): TranscriptEvent {
  const obj = JSON.parse(line) as Record<string, unknown>;
  if (typeof obj.kind !== "string" || typeof obj.seq !== "number" ||
      typeof obj.t !== "number" || typeof obj.data !== "object" ||
      obj.data === null) {
    throw new Error(`not a transcript event: ${line.slice(0, 80)}`);
  }
  return obj as unknown as TranscriptEvent;
}

/**
 * A replayed transcript event, reshaped into the stream form so live
 * and replay feed the session through one code path.
 */
export function transcriptToStream(ev: TranscriptEvent): StreamEvent {
  return { type: ev.kind, seq: ev.seq, payload: { t: ev.t, ...ev.data } };
}

/**
 * Recursively sort object keys. The same event reaches the console in
 * two spellings - stream lines serialize fully key-sorted, replayed
 * transcript rows get t spliced in front - and JSON.stringify keeps
 * insertion order, so canonical key order is what makes live and
 * replay data layers serialize byte-identically.
 */
export function canonicalize<T>(value: T): T {
  if (Array.isArray(value)) {
    return value.map(canonicalize) as unknown as T;
  }
  if (value !== null && typeof value === "object") {
    const src = value as Record<string, unknown>;
    const out: Record<string, unknown> = {};
    for (const key of Object.keys(src).sort()) {
      out[key] = canonicalize(src[key]);
    }
    return out as unknown as T;
  }
  return value;
}

/** Split NDJSON text into parsed transcript events. */
export function parseTranscript(text: string): TranscriptEvent[] {
  return text
    .split("\n")
    .filter((l) => l.trim().length > 0)
    .map(parseTranscriptLine);
}

/**
 * Incremental NDJSON splitter for chunked streams: feed() returns the
 * complete lines, keeping a partial trailing line buffered.
 */
export class NdjsonSplitter {
  private buffer = "";

  feed(chunk: string): string[] {
    this.buffer += chunk;
    const parts = this.buffer.split("\n");
    this.buffer = parts.pop() ?? "";
    return parts.filter((l) => l.trim().length > 0);
  }

  /** Any buffered partial line (complete only if the stream ended). */
  flush(): string[] {
    const rest = this.buffer.trim();
    this.buffer = "";
    return rest.length > 0 ? [rest] : [];
  }
}

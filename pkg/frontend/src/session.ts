/**
 * ConsoleSession: the console's data layer.
 *
 * One applyEvent() path serves both live streams and transcript
 * replays. Only transcript-kind events (the ones a saved run contains)
 * touch the canonical buffers, so replaying a transcript reconstructs
 * exactly the state a live run built; live-only events (tick,
 * awaiting-decision, end, error, stale-command) update ephemeral
 * cursor/connection state that dataLayer() excludes.
 */

import type {
  AssessmentPayload,
  CheckPayload,
  DecisionPayload,
  DiagnosisPayload,
  FaultPayload,
  OutcomePayload,
  Phase,
  RecommendationPayload,
  ScramPayload,
  SensorPayload,
  SteadyPayload,
  StreamEvent,
  TickPayload,
  TranscriptEvent,
  TripPayload,
} from "./schema.js";
import { canonicalize, transcriptToStream } from "./schema.js";

export const DEFAULT_CHANNELS = ["T_HPP", "T_LPP", "T_UP"];
export const DEFAULT_LIMIT = 685.0;

/** Mirror of the gateway's event-to-phase mapping. */
const EVENT_PHASE: Record<string, Phase> = {
  steady: "steady",
  fault: "transient",
  diagnosis: "paused",
  decision: "post-action",
  outcome: "terminated",
};

const TRANSCRIPT_KINDS = new Set([
  "steady", "fault", "sensor", "diagnosis", "assessment",
  "recommendation", "decision", "trip", "check", "scram", "outcome",
]);

export type ConnectionState = "idle" | "live" | "replay" | "lost" | "ended";

export type AlertSeverity = "info" | "warning" | "danger";

export interface Alert {
  t: number;
  severity: AlertSeverity;
  title: string;
  detail: string;
}

export interface TrendPoint {
  t: number;
  values: (number | null)[];
  diagnosed: number | null;
  trueTPfcl: number | null; // simulator ground truth (demo mode only)
}

export interface PendingDecision {
  scramAdvised: boolean;
}

/** Everything render functions read; live and replay must agree on it. */
export interface DataLayer {
  phase: Phase;
  channels: string[];
  limit: number;
  tAcc: number | null;
  tRecommend: number | null;
  steady: SteadyPayload | null;
  fault: FaultPayload | null;
  trend: TrendPoint[];
  diagnosis: DiagnosisPayload | null;
  table: AssessmentPayload | null;
  recommendation: RecommendationPayload | null;
  decision: DecisionPayload | null;
  trips: TripPayload[];
  checks: CheckPayload[];
  scrams: ScramPayload[];
  outcome: OutcomePayload | null;
  alerts: Alert[];
}

const TIME_SLACK = 1e-9; // events carry repeated timestamps at a pause

export class ConsoleSession {
  connection: ConnectionState = "idle";
  lastError: string | null = null;
  /** Latest plant tick (live cursor; not part of the data layer). */
  cursor: TickPayload | null = null;
  pending: PendingDecision | null = null;

  phase: Phase = "steady";
  channels: string[];
  limit = DEFAULT_LIMIT;
  tAcc: number | null = null;
  tRecommend: number | null = null;
  steady: SteadyPayload | null = null;
  fault: FaultPayload | null = null;
  trend: TrendPoint[] = [];
  diagnosis: DiagnosisPayload | null = null;
  table: AssessmentPayload | null = null;
  recommendation: RecommendationPayload | null = null;
  decision: DecisionPayload | null = null;
  trips: TripPayload[] = [];
  checks: CheckPayload[] = [];
  scrams: ScramPayload[] = [];
  outcome: OutcomePayload | null = null;
  alerts: Alert[] = [];

  /** Count of distinct transcript-kind events applied (diagnostics). */
  transcriptCount = 0;
  /**
   * Keys of applied transcript-kind events. The live stream restates
   * events the bootstrap transcript already delivered; applying is
   * idempotent so the overlap is harmless. Every kind fires at most
   * once per timestamp, so (kind, t) identifies an event.
   */
  private seen = new Set<string>();

  constructor(channels: string[] = DEFAULT_CHANNELS) {
    this.channels = [...channels];
  }

  // -- invariant helpers ----------------------------------------------------

  private lastTrendTime(): number {
    const last = this.trend[this.trend.length - 1];
    return last ? last.t : -Infinity;
  }

  private pushTrend(point: TrendPoint): void {
    if (point.t < this.lastTrendTime() - TIME_SLACK) {
      throw new Error(
        `trend buffer must stay time-ordered: ${point.t} after ` +
        `${this.lastTrendTime()}`,
      );
    }
    this.trend.push(point);
  }

  private alert(t: number, severity: AlertSeverity, title: string,
                detail: string): void {
    this.alerts.push({ t, severity, title, detail });
  }

  /** Decision buttons: only while a decision is actually pending. */
  canDecide(): boolean {
    return this.phase === "paused" && this.pending !== null;
  }

  /** SCRAM is always enabled until the session is over. */
  canScram(): boolean {
    return this.phase !== "terminated" && this.connection !== "ended";
  }

  // -- event application ----------------------------------------------------

  applyTranscript(events: TranscriptEvent[]): void {
    for (const ev of events) this.applyEvent(transcriptToStream(ev));
  }

  applyEvent(ev: StreamEvent): void {
    // Stored payloads are canonicalized so the data layer serializes
    // identically whether an event arrived via the live stream or a
    // transcript replay (the two spell the same JSON differently).
    const p = canonicalize(ev.payload);
    const t = typeof p.t === "number" ? p.t : NaN;
    switch (ev.type) {
      case "tick":
        this.cursor = p as unknown as TickPayload;
        return;
      case "awaiting-decision":
        // at most one pending decision: a new one replaces the old
        this.pending = { scramAdvised: Boolean(p.scram) };
        this.phase = "paused";
        return;
      case "end":
        this.connection = "ended";
        this.pending = null;
        return;
      case "error":
        this.connection = "lost";
        this.lastError = String(p.message ?? "unknown gateway error");
        this.phase = "terminated";
        this.pending = null;
        return;
      case "stale-command":
        return; // ignored: command arrived after it could matter
      default:
        break;
    }
    if (!TRANSCRIPT_KINDS.has(ev.type)) return; // forward compatibility

    const key = `${ev.type}@${t}`;
    if (this.seen.has(key)) return;
    this.seen.add(key);
    this.transcriptCount += 1;
    const mapped = EVENT_PHASE[ev.type];
    if (mapped !== undefined) this.phase = mapped;

    switch (ev.type) {
      case "steady": {
        const d = p as unknown as SteadyPayload;
        this.steady = d;
        this.pushTrend({
          t,
          values: this.channels.map((c) => d.temperatures[c] ?? null),
          diagnosed: null,
          trueTPfcl: d.t_pfcl,
        });
        break;
      }
      case "fault": {
        this.fault = p as unknown as FaultPayload;
        this.tAcc = t;
        this.alert(t, "warning", "Pump-1 coastdown started",
          `pump 1 ramping to ${fmt(this.fault.w1_end)}x nominal over ` +
          `${fmt(this.fault.ramp_duration)} s`);
        break;
      }
      case "sensor": {
        const d = p as unknown as SensorPayload;
        this.pushTrend({
          t,
          values: d.values,
          diagnosed: d.diagnosed ?? null,
          trueTPfcl: d.true_t_pfcl,
        });
        break;
      }
      case "diagnosis": {
        this.diagnosis = p as unknown as DiagnosisPayload;
        this.tRecommend = t;
        break;
      }
      case "assessment": {
        const d = p as unknown as AssessmentPayload;
        this.table = d;
        this.limit = d.limit;
        break;
      }
      case "recommendation": {
        const d = p as unknown as RecommendationPayload;
        this.recommendation = d;
        if (d.scram) {
          this.alert(t, "danger", "SCRAM advised", d.text);
        } else {
          this.alert(t, "info", "Mitigation recommended", d.text);
        }
        break;
      }
      case "decision": {
        const d = p as unknown as DecisionPayload;
        this.decision = d;
        this.pending = null;
        this.alert(t, "info", `Decision: ${d.verdict}`,
          `${d.policy} policy`);
        break;
      }
      case "trip": {
        const d = p as unknown as TripPayload;
        this.trips.push(d);
        this.alert(t, "info", "Mitigation tripped",
          `pump 2 to ${fmt(d.w2_end)}x at diagnosed ` +
          `${fmt(d.diagnosed)} degC (setpoint ${fmt(d.t_trip)})`);
        break;
      }
      case "check": {
        const d = p as unknown as CheckPayload;
        this.checks.push(d);
        if (d.verdict === "anomaly") {
          const gap = Math.abs(d.observed_peak - d.predicted_peak);
          this.alert(t, "danger", "Discrepancy anomaly",
            `|observed - predicted| = ${fmt(gap)} degC exceeds ` +
            `X_lim = ${fmt(d.threshold)} degC`);
        }
        break;
      }
      case "scram": {
        const d = p as unknown as ScramPayload;
        this.scrams.push(d);
        this.pending = null;
        this.alert(t, "danger", "SCRAM", d.reason);
        break;
      }
      case "outcome": {
        const d = p as unknown as OutcomePayload;
        this.outcome = d;
        this.limit = d.limit;
        this.pending = null;
        this.alert(t, d.grade === 2 ? "info" : "warning",
          `Run complete: Level ${d.grade}`,
          `true peak ${fmt(d.max_true_t_pfcl)} degC vs limit ` +
          `${fmt(d.limit)} degC`);
        break;
      }
    }
  }

  /** Canonical, serializable view state shared by live and replay. */
  dataLayer(): DataLayer {
    return {
      phase: this.phase,
      channels: [...this.channels],
      limit: this.limit,
      tAcc: this.tAcc,
      tRecommend: this.tRecommend,
      steady: this.steady,
      fault: this.fault,
      trend: this.trend,
      diagnosis: this.diagnosis,
      table: this.table,
      recommendation: this.recommendation,
      decision: this.decision,
      trips: this.trips,
      checks: this.checks,
      scrams: this.scrams,
      outcome: this.outcome,
      alerts: this.alerts,
    };
  }
}

function fmt(x: number): string {
  return Number(x.toPrecision(6)).toString();
}

/**
 * Pure view functions: DataLayer in, SVG/HTML strings out.
 *
 * No DOM access and no randomness, so identical data layers render
 * byte-identical markup (the replay-identity guarantee). All
 * coordinates are rounded to 0.01 px before serialization.
 */

import type { Alert, DataLayer, TrendPoint } from "./session.js";
import type { ConsoleSession } from "./session.js";

export interface TrendOptions {
  width?: number;
  height?: number;
  /** Plot simulator ground-truth T_PFCL next to the diagnosis. */
  showTruth?: boolean;
}

const TREND_W = 800;
const TREND_H = 420;
const PAD = { left: 56, right: 16, top: 18, bottom: 34 };

function px(x: number): string {
  return (Math.round(x * 100) / 100).toString();
}

function esc(s: string): string {
  return s.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function fmt(x: number): string {
  return Number(x.toPrecision(6)).toString();
}

interface Scale {
  (v: number): number;
}

function linearScale(d0: number, d1: number, r0: number, r1: number): Scale {
  const span = d1 - d0 || 1;
  return (v: number) => r0 + ((v - d0) / span) * (r1 - r0);
}

/** Split a series into polyline runs, breaking at null samples. */
function runs(points: TrendPoint[], pick: (p: TrendPoint) => number | null,
              sx: Scale, sy: Scale): string[] {
  const out: string[] = [];
  let current: string[] = [];
  for (const p of points) {
    const v = pick(p);
    if (v === null || !Number.isFinite(v)) {
      if (current.length > 1) out.push(current.join(" "));
      current = [];
    } else {
      current.push(`${px(sx(p.t))},${px(sy(v))}`);
    }
  }
  if (current.length > 1) out.push(current.join(" "));
  return out;
}

/**
 * Transient trend view: sensor channels and diagnosed T_PFCL against
 * time, the safety limit line, and t_acc / t_rcmd markers.
 */
export function renderTrends(layer: DataLayer,
                             opts: TrendOptions = {}): string {
  const W = opts.width ?? TREND_W;
  const H = opts.height ?? TREND_H;
  const pts = layer.trend;
  if (pts.length < 2) {
    return `<svg class="trends" viewBox="0 0 ${W} ${H}" role="img">` +
      `<text class="placeholder" x="${px(W / 2)}" y="${px(H / 2)}">` +
      `waiting for samples</text></svg>`;
  }

  const t0 = pts[0]!.t;
  const t1 = pts[pts.length - 1]!.t;
  let lo = Infinity;
  let hi = -Infinity;
  for (const p of pts) {
    for (const v of p.values) {
      if (v !== null) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
    }
    if (p.diagnosed !== null) {
      lo = Math.min(lo, p.diagnosed); hi = Math.max(hi, p.diagnosed);
    }
    if (opts.showTruth && p.trueTPfcl !== null) {
      lo = Math.min(lo, p.trueTPfcl); hi = Math.max(hi, p.trueTPfcl);
    }
  }
  lo = Math.min(lo, layer.limit);
  hi = Math.max(hi, layer.limit);
  const margin = 0.05 * (hi - lo || 1);
  lo -= margin;
  hi += margin;

  const sx = linearScale(t0, t1, PAD.left, W - PAD.right);
  const sy = linearScale(lo, hi, H - PAD.bottom, PAD.top);
  const parts: string[] = [];
  parts.push(`<svg class="trends" viewBox="0 0 ${W} ${H}" role="img">`);

  parts.push(`<rect class="plot-bg" x="${px(PAD.left)}" y="${px(PAD.top)}" ` +
    `width="${px(W - PAD.left - PAD.right)}" ` +
    `height="${px(H - PAD.top - PAD.bottom)}"/>`);

  // Safety limit line.
  const yLim = sy(layer.limit);
  parts.push(`<line class="limit-line" x1="${px(PAD.left)}" y1="${px(yLim)}" ` +
    `x2="${px(W - PAD.right)}" y2="${px(yLim)}"/>`);
  parts.push(`<text class="limit-label" x="${px(W - PAD.right - 4)}" ` +
    `y="${px(yLim - 4)}">limit ${fmt(layer.limit)} degC</text>`);

  // Timeline markers.
  const markers: Array<[number | null, string]> = [
    [layer.tAcc, "t_acc"],
    [layer.tRecommend, "t_rcmd"],
  ];
  for (const [tm, label] of markers) {
    if (tm === null || tm < t0 || tm > t1) continue;
    const x = sx(tm);
    parts.push(`<line class="marker marker-${label}" x1="${px(x)}" ` +
      `y1="${px(PAD.top)}" x2="${px(x)}" y2="${px(H - PAD.bottom)}"/>`);
    parts.push(`<text class="marker-label" x="${px(x + 3)}" ` +
      `y="${px(PAD.top + 12)}">${label}</text>`);
  }

  // Sensor channel traces (null-valued samples break the line).
  layer.channels.forEach((name, i) => {
    for (const run of runs(pts, (p) => p.values[i] ?? null, sx, sy)) {
      parts.push(`<polyline class="trace channel-${i}" ` +
        `data-name="${esc(name)}" points="${run}"/>`);
    }
  });

  // Diagnosed T_PFCL, with over-limit segments highlighted.
  for (const run of runs(pts, (p) => p.diagnosed, sx, sy)) {
    parts.push(`<polyline class="trace diagnosed" ` +
      `data-name="diagnosed T_PFCL" points="${run}"/>`);
  }
  const over = (p: TrendPoint) =>
    p.diagnosed !== null && p.diagnosed >= layer.limit ? p.diagnosed : null;
  for (const run of runs(pts, over, sx, sy)) {
    parts.push(`<polyline class="trace diagnosed over-limit" points="${run}"/>`);
  }

  if (opts.showTruth) {
    for (const run of runs(pts, (p) => p.trueTPfcl, sx, sy)) {
      parts.push(`<polyline class="trace truth" ` +
        `data-name="true T_PFCL (simulator only)" points="${run}"/>`);
    }
  }

  // Axis extremes, enough to read the scales.
  parts.push(`<text class="axis" x="${px(PAD.left)}" ` +
    `y="${px(H - 10)}">t = ${fmt(t0)} s</text>`);
  parts.push(`<text class="axis axis-right" x="${px(W - PAD.right)}" ` +
    `y="${px(H - 10)}">${fmt(t1)} s</text>`);
  parts.push(`<text class="axis" x="4" y="${px(sy(hi - margin) + 4)}">` +
    `${fmt(hi - margin)}</text>`);
  parts.push(`<text class="axis" x="4" y="${px(sy(lo + margin) + 4)}">` +
    `${fmt(lo + margin)}</text>`);

  parts.push("</svg>");
  return parts.join("");
}

/**
 * Margin contour view: heatmap over (T_trip, w2_end) with the safe
 * region flagged per cell and the recommended strategy marked.
 */
export function renderMarginMap(layer: DataLayer): string {
  const table = layer.table;
  if (table === null || table.w2_end.length === 0) {
    return `<div class="margin-map empty">no margin table yet</div>`;
  }
  const w2s = [...new Set(table.w2_end)].sort((a, b) => a - b);
  const trips = [...new Set(table.t_trip)].sort((a, b) => a - b);
  const index = new Map<string, number>();
  table.w2_end.forEach((w, i) => {
    index.set(`${w}|${table.t_trip[i]}`, i);
  });

  const rec = layer.recommendation;
  const parts: string[] = [];
  if (rec !== null && rec.scram) {
    parts.push(`<div class="scram-banner">SCRAM advised: ` +
      `${esc(rec.reason)}</div>`);
  }
  parts.push(`<table class="margin-map"><thead><tr>` +
    `<th class="corner">w2 \\ T_trip</th>` +
    trips.map((tr) => `<th>${fmt(tr)}</th>`).join("") +
    `</tr></thead><tbody>`);
  // Highest pump speed on top, matching the contour orientation.
  for (const w of [...w2s].reverse()) {
    parts.push(`<tr><th>${fmt(w)}x</th>`);
    for (const tr of trips) {
      const i = index.get(`${w}|${tr}`);
      if (i === undefined) {
        parts.push(`<td class="cell missing"></td>`);
        continue;
      }
      const margin = table.margin[i]!;
      const safe = table.safe[i]!;
      const recommended = rec !== null && !rec.scram &&
        rec.w2_end === w && rec.t_trip === tr;
      const cls = `cell ${safe ? "safe" : "unsafe"}` +
        (recommended ? " recommended" : "");
      const mark = recommended ? `<span class="pick">recommended</span>` : "";
      parts.push(`<td class="${cls}" data-margin="${fmt(margin)}">` +
        `${fmt(margin)}${mark}</td>`);
    }
    parts.push(`</tr>`);
  }
  parts.push(`</tbody></table>`);
  return parts.join("");
}

/** Alert panel, newest first. */
export function renderAlerts(alerts: Alert[]): string {
  if (alerts.length === 0) {
    return `<ul class="alerts empty"></ul>`;
  }
  const items = [...alerts].reverse().map((a) =>
    `<li class="alert ${a.severity}">` +
    `<span class="time">t=${fmt(a.t)} s</span>` +
    `<span class="title">${esc(a.title)}</span>` +
    `<span class="detail">${esc(a.detail)}</span></li>`);
  return `<ul class="alerts">${items.join("")}</ul>`;
}

/**
 * Decision controls. Accept/reject operate only while a decision is
 * pending; SCRAM stays live until the session terminates.
 */
export function renderControls(session: ConsoleSession): string {
  const decide = session.canDecide();
  const scram = session.canScram();
  const dis = (on: boolean) => (on ? "" : " disabled");
  return (
    `<div class="controls" data-phase="${esc(session.phase)}">` +
    `<button class="accept" data-command="accept"${dis(decide)}>Accept</button>` +
    `<button class="reject" data-command="reject"${dis(decide)}>Reject</button>` +
    `<button class="scram" data-command="scram"${dis(scram)}>SCRAM</button>` +
    `</div>`
  );
}

/** Connection banner; empty string while the link is healthy. */
export function renderBanner(session: ConsoleSession): string {
  if (session.connection === "lost") {
    const why = session.lastError ? `: ${esc(session.lastError)}` : "";
    return `<div class="banner disconnected">gateway connection lost${why}</div>`;
  }
  return "";
}

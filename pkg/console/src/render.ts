/**
 * Pure text rendering of the view state: ANSI-free strings so frames are
 * trivially testable and pipe-safe. Every rendered number is read from the
 * view, which in turn holds only received message fields.
 */
import { ViewState } from "./state.js";

const SPARK = "▁▂▃▄▅▆▇█";

/** Fixed-range sparkline; values outside [lo, hi] are clamped. */
export function sparkline(series: number[], lo: number, hi: number, width: number): string {
  if (series.length === 0) return "".padEnd(width);
  const tail = series.slice(-width);
  const span = hi - lo;
  const chars = tail.map((v) => {
    const t = span > 0 ? (v - lo) / span : 0;
    const idx = Math.min(SPARK.length - 1, Math.max(0, Math.floor(t * SPARK.length)));
    return SPARK[idx];
  });
  return chars.join("").padEnd(width);
}

function bar(value: number, width: number): string {
  const n = Math.min(width, Math.max(0, Math.round(value * width)));
  return "#".repeat(n).padEnd(width);
}

export const CHART_WIDTH = 60;

export function renderFrame(view: ViewState): string {
  const lines: string[] = [];
  const r = view.lastRecord;
  const status = view.status.toUpperCase();
  lines.push(
    `session ${view.sessionId}  [${status}]  theta v${view.thetaVersion}  ` +
      `seq ${view.lastSeq}  cycles ${view.cycles}` +
      (view.droppedTotal > 0 ? `  gaps ${view.droppedTotal} dropped` : ""),
  );
  if (r === null) {
    lines.push("(waiting for first state message)");
    return lines.join("\n");
  }

  const sp = view.spSeries[view.spSeries.length - 1] ?? NaN;
  const v = view.vSeries[view.vSeries.length - 1] ?? NaN;
  const bandLo = view.spStar - view.gammaNoop;
  const bandHi = view.spStar + view.gammaNoop;
  lines.push(
    `SP ${sp.toFixed(4)}  target ${view.spStar.toFixed(2)}  ` +
      `no-op band [${bandLo.toFixed(3)}, ${bandHi.toFixed(3)}]  ` +
      `error ${r.delta_sp.toFixed(4)}`,
  );
  lines.push(`  SP(t) |${sparkline(view.spSeries, 0, 1, CHART_WIDTH)}|`);
  lines.push(`V  ${v.toExponential(3)}`);
  const vMax = view.vSeries.reduce((a, b) => Math.max(a, b), 0);
  lines.push(`  V(t)  |${sparkline(view.vSeries, 0, vMax > 0 ? vMax : 1, CHART_WIDTH)}|`);
  lines.push(
    `episode ${r.episode.outcome}  steps ${r.episode.steps_used}  ` +
      `terminal gap ${r.episode.safety_gap.toFixed(4)}  ` +
      `prediction ${r.prediction ?? "abstain"}`,
  );

  lines.push("markers:");
  for (const m of view.markers) {
    const star = m.shown ? "*" : " ";
    const chip = m.chip === null ? "" : `  [${m.chip}]`;
    lines.push(
      ` ${star} m${m.id}  ${m.confidence.toFixed(4)}  ${bar(m.confidence, 24)}${chip}`,
    );
  }

  lines.push(
    `controller ${r.controller.event}  u_h ${r.controller.u_h_norm.toExponential(2)}  ` +
      `feedback applied ${r.feedback.applied.length} discarded ${r.feedback.discarded.length}`,
  );

  if (view.ticker.length > 0) {
    lines.push("events:");
    for (const t of view.ticker.slice(-6)) {
      lines.push(`  seq ${t.seq}  ${t.event}${t.detail ? "  " + t.detail : ""}`);
    }
  }
  if (view.acks.length > 0) {
    lines.push("feedback acks:");
    for (const a of view.acks.slice(-5)) {
      const tag = a.fresh ? "FRESH" : "STALE";
      lines.push(`  ${a.eventId}  ${tag}  (theta v${a.thetaVersion})`);
    }
  }
  return lines.join("\n");
}

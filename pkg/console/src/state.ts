/**
 * View state for the operator console, reduced purely from received
 * messages. The displayed parameter version is always the version carried
 * by the most recently rendered message, and every number held here is a
 * field copied from the wire — no client-side recomputation.
 */
import { AuditRecord, FeedbackAck, GapMsg, StateMsg } from "./protocol.js";

export const CHART_CAPACITY = 240;
export const TICKER_CAPACITY = 40;
export const ACK_CAPACITY = 20;

export type ConnectionStatus = "connecting" | "live" | "stale";

export interface TickerEntry {
  seq: number;
  event: string;
  detail: string;
}

export interface AckView {
  eventId: string;
  fresh: boolean;
  thetaVersion: number;
}

export interface MarkerView {
  id: number;
  confidence: number;
  /** Rationale chip: strongest attributed feature and its sign. */
  chip: string | null;
  shown: boolean;
}

export interface ViewState {
  sessionId: string;
  status: ConnectionStatus;
  thetaVersion: number;
  lastSeq: number;
  lastMsgSeq: number;
  cycles: number;
  droppedTotal: number;
  spSeries: number[];
  vSeries: number[];
  spStar: number;
  gammaNoop: number;
  markers: MarkerView[];
  ticker: TickerEntry[];
  acks: AckView[];
  lastRecord: AuditRecord | null;
}

export function newView(sessionId: string): ViewState {
  return {
    sessionId,
    status: "connecting",
    thetaVersion: 0,
    lastSeq: -1,
    lastMsgSeq: -1,
    cycles: 0,
    droppedTotal: 0,
    spSeries: [],
    vSeries: [],
    spStar: NaN,
    gammaNoop: NaN,
    markers: [],
    ticker: [],
    acks: [],
    lastRecord: null,
  };
}

function pushCapped<T>(arr: T[], item: T, cap: number): void {
  arr.push(item);
  if (arr.length > cap) arr.splice(0, arr.length - cap);
}

function markerViews(record: AuditRecord): MarkerView[] {
  let shown = 0;
  record.markers.forEach((c, i) => {
    const top = record.markers[shown];
    if (top === undefined || c > top) shown = i;
  });
  return record.markers.map((confidence, id) => {
    const tf = record.top_feats[id] ?? null;
    const chip = tf === null ? null : `${tf[1] >= 0 ? "+" : "-"}${tf[0]}`;
    return { id, confidence, chip, shown: id === shown };
  });
}

const TICKER_EVENTS = new Set([
  "update",
  "reject",
  "rollback",
  "budget-violation",
]);

export function applyState(view: ViewState, msg: StateMsg): void {
  const r = msg.record;
  view.status = "live";
  view.lastMsgSeq = msg.msg_seq;
  view.lastSeq = r.seq;
  view.thetaVersion = r.theta_version;
  view.cycles += 1;
  pushCapped(view.spSeries, r.sp, CHART_CAPACITY);
  pushCapped(view.vSeries, r.v, CHART_CAPACITY);
  view.spStar = r.sp_star;
  view.gammaNoop = r.gamma_noop;
  view.markers = markerViews(r);
  view.lastRecord = r;
  const ev = r.controller.event;
  if (TICKER_EVENTS.has(ev)) {
    const detail =
      ev === "update"
        ? `|step|=${r.controller.step_norm.toExponential(2)}`
        : ev === "budget-violation"
          ? `lambda=${r.controller.lambda_h.toExponential(2)} budget=${r.controller.budget.toExponential(2)}`
          : "";
    pushCapped(view.ticker, { seq: r.seq, event: ev, detail }, TICKER_CAPACITY);
  }
  if (r.rollback) {
    pushCapped(view.ticker, { seq: r.seq, event: "rollback", detail: "" }, TICKER_CAPACITY);
  }
}

export function applyGap(view: ViewState, msg: GapMsg): void {
  view.lastMsgSeq = msg.msg_seq;
  view.droppedTotal += msg.dropped;
  pushCapped(
    view.ticker,
    { seq: view.lastSeq, event: "gap", detail: `${msg.dropped} dropped` },
    TICKER_CAPACITY,
  );
}

export function applyAck(view: ViewState, ack: FeedbackAck): void {
  pushCapped(
    view.acks,
    { eventId: ack.event_id, fresh: ack.fresh, thetaVersion: ack.theta_version },
    ACK_CAPACITY,
  );
}

export function markDisconnected(view: ViewState): void {
  view.status = "stale";
}

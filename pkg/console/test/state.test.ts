import { describe, expect, it } from "vitest";
import { GapMsg, StateMsg } from "../src/protocol.js";
import {
  ACK_CAPACITY,
  CHART_CAPACITY,
  TICKER_CAPACITY,
  applyAck,
  applyGap,
  applyState,
  markDisconnected,
  newView,
} from "../src/state.js";
import { makeRecord } from "./protocol.test.js";

function stateMsg(msgSeq: number, overrides = {}): StateMsg {
  return {
    schema: "sci.msg/1",
    type: "state",
    msg_seq: msgSeq,
    record: makeRecord(overrides),
  };
}

function gapMsg(msgSeq: number, dropped: number): GapMsg {
  return { schema: "sci.msg/1", type: "gap", msg_seq: msgSeq, dropped };
}

describe("view state reducer", () => {
  it("tracks series, target, and band from each message", () => {
    const view = newView("bearing-42");
    expect(view.status).toBe("connecting");
    applyState(view, stateMsg(1, { sp: 0.3, v: 0.15 }));
    applyState(view, stateMsg(2, { sp: 0.5, v: 0.06 }));
    expect(view.status).toBe("live");
    expect(view.spSeries).toEqual([0.3, 0.5]);
    expect(view.vSeries).toEqual([0.15, 0.06]);
    expect(view.spStar).toBeCloseTo(0.85, 12);
    expect(view.gammaNoop).toBeCloseTo(0.0123, 12);
    expect(view.cycles).toBe(2);
    expect(view.lastMsgSeq).toBe(2);
  });

  it("always displays the parameter version of the latest rendered message", () => {
    const view = newView("s");
    for (const [seq, version] of [[1, 0], [2, 3], [3, 3], [4, 7]] as const) {
      applyState(view, stateMsg(seq, { theta_version: version, controller: { ...makeRecord().controller, theta_version: version } }));
      expect(view.thetaVersion).toBe(version);
    }
  });

  it("caps rolling charts at their capacity, keeping the newest points", () => {
    const view = newView("s");
    for (let i = 0; i < CHART_CAPACITY + 25; i++) {
      applyState(view, stateMsg(i + 1, { sp: i / 1000 }));
    }
    expect(view.spSeries).toHaveLength(CHART_CAPACITY);
    expect(view.spSeries[CHART_CAPACITY - 1]).toBeCloseTo((CHART_CAPACITY + 24) / 1000, 12);
  });

  it("marks the shown marker as the highest-confidence one and builds chips", () => {
    const view = newView("s");
    applyState(view, stateMsg(1));
    const shown = view.markers.filter((m) => m.shown);
    expect(shown).toHaveLength(1);
    expect(shown[0]?.id).toBe(0);
    expect(shown[0]?.chip).toBe("+band_0");
    expect(view.markers[2]?.chip).toBe("-trend");
    expect(view.markers[1]?.chip).toBeNull();
  });

  it("feeds the event ticker from controller events and caps it", () => {
    const view = newView("s");
    const ctl = makeRecord().controller;
    applyState(view, stateMsg(1, { controller: { ...ctl, event: "no-op" } }));
    expect(view.ticker).toHaveLength(0);
    applyState(view, stateMsg(2, { controller: { ...ctl, event: "reject" } }));
    applyState(view, stateMsg(3, { controller: { ...ctl, event: "budget-violation" } }));
    expect(view.ticker.map((t) => t.event)).toEqual(["reject", "budget-violation"]);
    for (let i = 0; i < TICKER_CAPACITY + 10; i++) {
      applyState(view, stateMsg(4 + i, { controller: { ...ctl, event: "update" } }));
    }
    expect(view.ticker).toHaveLength(TICKER_CAPACITY);
  });

  it("accumulates gap markers into the drop counter and the ticker", () => {
    const view = newView("s");
    applyState(view, stateMsg(1));
    applyGap(view, gapMsg(5, 3));
    applyGap(view, gapMsg(9, 2));
    expect(view.droppedTotal).toBe(5);
    expect(view.lastMsgSeq).toBe(9);
    expect(view.ticker.filter((t) => t.event === "gap")).toHaveLength(2);
  });

  it("keeps acks with their freshness flag, capped", () => {
    const view = newView("s");
    for (let i = 0; i < ACK_CAPACITY + 5; i++) {
      applyAck(view, {
        schema: "sci.msg/1",
        ok: true,
        cmd: "feedback",
        event_id: `e${i}`,
        fresh: i % 2 === 0,
        theta_version: i,
      });
    }
    expect(view.acks).toHaveLength(ACK_CAPACITY);
    expect(view.acks[view.acks.length - 1]?.eventId).toBe(`e${ACK_CAPACITY + 4}`);
    expect(view.acks.some((a) => !a.fresh)).toBe(true);
  });

  it("flags the view stale on disconnect without losing history", () => {
    const view = newView("s");
    applyState(view, stateMsg(1));
    markDisconnected(view);
    expect(view.status).toBe("stale");
    expect(view.spSeries).toHaveLength(1);
  });
});

import { describe, expect, it } from "vitest";
import {
  AuditRecord,
  buildVerdict,
  feedbackAckSchema,
  parseLine,
} from "../src/protocol.js";

export function makeRecord(overrides: Partial<AuditRecord> = {}): AuditRecord {
  return {
    schema: "sci.audit/1",
    session: "bearing-42",
    seq: 360,
    theta_version: 3,
    sp: 0.4123,
    sp_star: 0.85,
    delta_sp: 0.4377,
    v: 0.0958,
    gamma_noop: 0.0123,
    event: "update",
    markers: [0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.05, 0.05],
    prediction: 1,
    label: 1,
    top_feats: [["band_0", 1], null, ["trend", -1], null, null, null, null, null],
    episode: {
      outcome: "settled",
      prediction: 1,
      steps_used: 7,
      sp_final: 0.41,
      safety_gap: 0.44,
    },
    controller: {
      event: "update",
      step_norm: 0.001,
      lambda_h: 0.0,
      budget: 1e-6,
      u_h_norm: 0.0,
      v_before: 0.0958,
      v_after: 0.0957,
      theta_version: 3,
      grad_norm: 0.2,
      delta_sp: 0.4377,
    },
    feedback: {
      applied: [],
      discarded: [],
      disagreement: 0.0,
      u_norm: 0.0,
      lambda_eff: 0.0,
    },
    rollback: false,
    ...overrides,
  };
}

function stateLine(record: AuditRecord, msgSeq = 1): string {
  return JSON.stringify({
    schema: "sci.msg/1",
    type: "state",
    msg_seq: msgSeq,
    record,
  });
}

describe("parseLine", () => {
  it("classifies state messages and validates the embedded record", () => {
    const p = parseLine(stateLine(makeRecord()));
    expect(p.kind).toBe("state");
    if (p.kind !== "state") return;
    expect(p.msg.record.sp).toBeCloseTo(0.4123, 10);
    expect(p.msg.record.markers).toHaveLength(8);
    expect(p.msg.record.controller.event).toBe("update");
  });

  it("classifies gap messages", () => {
    const p = parseLine(
      JSON.stringify({ schema: "sci.msg/1", type: "gap", msg_seq: 9, dropped: 4 }),
    );
    expect(p.kind).toBe("gap");
    if (p.kind === "gap") expect(p.msg.dropped).toBe(4);
  });

  it("classifies command responses, ok and error alike", () => {
    const ok = parseLine(
      JSON.stringify({ schema: "sci.msg/1", ok: true, cmd: "status", state: "idle" }),
    );
    expect(ok.kind).toBe("response");
    const err = parseLine(
      JSON.stringify({
        schema: "sci.msg/1",
        ok: false,
        cmd: null,
        error: "parse error at position 3",
      }),
    );
    expect(err.kind).toBe("response");
    if (err.kind === "response") expect(err.msg.error).toMatch(/position 3/);
  });

  it("parses feedback acks with freshness", () => {
    const p = parseLine(
      JSON.stringify({
        schema: "sci.msg/1",
        ok: true,
        cmd: "feedback",
        session: "bearing-42",
        event_id: "ui-1",
        fresh: false,
        theta_version: 5,
      }),
    );
    expect(p.kind).toBe("response");
    if (p.kind !== "response") return;
    const ack = feedbackAckSchema.parse(p.msg);
    expect(ack.fresh).toBe(false);
    expect(ack.theta_version).toBe(5);
  });

  it("flags junk, truncated JSON, and unknown shapes as invalid", () => {
    expect(parseLine("not json at all").kind).toBe("invalid");
    expect(parseLine('{"schema": "sci.msg/1", "ok": tru').kind).toBe("invalid");
    expect(parseLine('{"schema": "sci.msg/1"}').kind).toBe("invalid");
    expect(parseLine("3").kind).toBe("invalid");
    const badState = parseLine(
      JSON.stringify({ schema: "sci.msg/1", type: "state", msg_seq: 1, record: { seq: 1 } }),
    );
    expect(badState.kind).toBe("invalid");
  });

  it("accepts null v_before/v_after (serialized NaN) in controller events", () => {
    const rec = makeRecord();
    rec.controller.v_before = null;
    rec.controller.v_after = null;
    expect(parseLine(stateLine(rec)).kind).toBe("state");
  });
});

describe("buildVerdict", () => {
  const base = {
    sessionId: "bearing-42",
    markerId: 3,
    verdict: "deny" as const,
    severity: 0.8,
    windowSeq: 412,
    thetaVersion: 7,
  };

  it("stamps the displayed window seq and parameter version", () => {
    const req = buildVerdict(base);
    expect(req.cmd).toBe("feedback");
    expect(req.session).toBe("bearing-42");
    expect(req.event["window_seq"]).toBe(412);
    expect(req.event["theta_version"]).toBe(7);
    expect(req.event["marker_id"]).toBe(3);
    expect(req.event["verdict"]).toBe("deny");
    expect(req.event["severity"]).toBe(0.8);
    expect(typeof req.event["event_id"]).toBe("string");
  });

  it("enforces severity in (0, 1]", () => {
    expect(() => buildVerdict({ ...base, severity: 0 })).toThrow(RangeError);
    expect(() => buildVerdict({ ...base, severity: 1.2 })).toThrow(RangeError);
    expect(() => buildVerdict({ ...base, severity: NaN })).toThrow(RangeError);
    expect(buildVerdict({ ...base, severity: 1.0 }).event["severity"]).toBe(1.0);
  });

  it("never emits an event without seq and version", () => {
    expect(() => buildVerdict({ ...base, windowSeq: -1 })).toThrow(/window seq/);
    expect(() => buildVerdict({ ...base, windowSeq: 1.5 })).toThrow(/window seq/);
    expect(() => buildVerdict({ ...base, thetaVersion: -2 })).toThrow(/theta version/);
    expect(() => buildVerdict({ ...base, thetaVersion: NaN })).toThrow(/theta version/);
  });

  it("passes an attribution nudge through untouched", () => {
    const req = buildVerdict({ ...base, nudge: { band_0: 1, trend: -1 } });
    expect(req.event["nudge"]).toEqual({ band_0: 1, trend: -1 });
    expect(buildVerdict(base).event["nudge"]).toBeUndefined();
  });

  it("generates distinct event ids when none are supplied", () => {
    const a = buildVerdict(base).event["event_id"];
    const b = buildVerdict(base).event["event_id"];
    expect(a).not.toBe(b);
    expect(buildVerdict({ ...base, eventId: "mine" }).event["event_id"]).toBe("mine");
  });
});

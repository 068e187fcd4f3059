/**
 * Wire protocol: line-delimited JSON over a local TCP socket.
 *
 * Three line shapes arrive on a connection:
 *   - command responses   {schema, ok, cmd?, ...}   (one per request, in order)
 *   - state messages      {schema, type: "state", msg_seq, record}
 *   - gap markers         {schema, type: "gap", msg_seq, dropped}
 *
 * Every number the console renders comes out of these parsed messages;
 * nothing is recomputed client-side.
 */
import { z } from "zod";

export const MSG_SCHEMA = "sci.msg/1";
export const AUDIT_SCHEMA = "sci.audit/1";

/** Per-marker attribution chip: [feature name, sign], or null when flat. */
const topFeat = z.union([z.tuple([z.string(), z.number()]), z.null()]);

/** Controller event record embedded in each audit record. */
export const controllerEventSchema = z
  .object({
    event: z.string(),
    step_norm: z.number(),
    lambda_h: z.number(),
    budget: z.number(),
    u_h_norm: z.number(),
    v_before: z.number().nullable(),
    v_after: z.number().nullable(),
    theta_version: z.number().int(),
    grad_norm: z.number(),
    delta_sp: z.number(),
  })
  .passthrough();

export const feedbackSummarySchema = z
  .object({
    applied: z.array(z.string()),
    discarded: z.array(z.string()),
    disagreement: z.number(),
    u_norm: z.number(),
    lambda_eff: z.number(),
  })
  .passthrough();

export const episodeSummarySchema = z
  .object({
    outcome: z.string(),
    prediction: z.number().int().nullable(),
    steps_used: z.number().int(),
    sp_final: z.number(),
    safety_gap: z.number(),
  })
  .passthrough();

/** One closed-loop cycle as audited by the service (sci.audit/1). */
export const auditRecordSchema = z
  .object({
    schema: z.literal(AUDIT_SCHEMA),
    session: z.string(),
    seq: z.number().int(),
    theta_version: z.number().int(),
    sp: z.number(),
    sp_star: z.number(),
    delta_sp: z.number(),
    v: z.number(),
    gamma_noop: z.number(),
    event: z.string(),
    markers: z.array(z.number()),
    prediction: z.number().int().nullable(),
    label: z.number().int().nullable(),
    top_feats: z.array(topFeat),
    episode: episodeSummarySchema,
    controller: controllerEventSchema,
    feedback: feedbackSummarySchema,
    rollback: z.boolean(),
  })
  .passthrough();

export type AuditRecord = z.infer<typeof auditRecordSchema>;

export const stateMsgSchema = z
  .object({
    schema: z.literal(MSG_SCHEMA),
    type: z.literal("state"),
    msg_seq: z.number().int(),
    record: auditRecordSchema,
  })
  .passthrough();

export const gapMsgSchema = z
  .object({
    schema: z.literal(MSG_SCHEMA),
    type: z.literal("gap"),
    msg_seq: z.number().int(),
    dropped: z.number().int(),
  })
  .passthrough();

export const responseSchema = z
  .object({
    schema: z.literal(MSG_SCHEMA),
    ok: z.boolean(),
    cmd: z.string().nullish(),
    error: z.string().optional(),
  })
  .passthrough();

export type StateMsg = z.infer<typeof stateMsgSchema>;
export type GapMsg = z.infer<typeof gapMsgSchema>;
export type Response = z.infer<typeof responseSchema>;

/** Feedback acknowledgement body merged into the feedback response. */
export const feedbackAckSchema = responseSchema.extend({
  event_id: z.string(),
  fresh: z.boolean(),
  theta_version: z.number().int(),
});
export type FeedbackAck = z.infer<typeof feedbackAckSchema>;

export type ParsedLine =
  | { kind: "state"; msg: StateMsg }
  | { kind: "gap"; msg: GapMsg }
  | { kind: "response"; msg: Response }
  | { kind: "invalid"; error: string; raw: string };

/** Classify and validate one received line. */
export function parseLine(line: string): ParsedLine {
  let obj: unknown;
  try {
    obj = JSON.parse(line);
  } catch (e) {
    return { kind: "invalid", error: `not JSON: ${(e as Error).message}`, raw: line };
  }
  if (typeof obj !== "object" || obj === null) {
    return { kind: "invalid", error: "not an object", raw: line };
  }
  const rec = obj as Record<string, unknown>;
  if (rec["type"] === "state") {
    const p = stateMsgSchema.safeParse(rec);
    return p.success
      ? { kind: "state", msg: p.data }
      : { kind: "invalid", error: p.error.issues[0]?.message ?? "bad state", raw: line };
  }
  if (rec["type"] === "gap") {
    const p = gapMsgSchema.safeParse(rec);
    return p.success
      ? { kind: "gap", msg: p.data }
      : { kind: "invalid", error: p.error.issues[0]?.message ?? "bad gap", raw: line };
  }
  if ("ok" in rec) {
    const p = responseSchema.safeParse(rec);
    return p.success
      ? { kind: "response", msg: p.data }
      : { kind: "invalid", error: p.error.issues[0]?.message ?? "bad response", raw: line };
  }
  return { kind: "invalid", error: "unrecognized line shape", raw: line };
}

export type Verdict = "confirm" | "deny";

export interface VerdictInputs {
  sessionId: string;
  markerId: number;
  verdict: Verdict;
  severity: number;
  /** Window the operator was looking at. */
  windowSeq: number;
  /** Parameter version displayed when the verdict was formed. */
  thetaVersion: number;
  eventId?: string;
  /** Optional attribution nudge: feature name -> desired sign. */
  nudge?: Record<string, number>;
}

let verdictCounter = 0;

/**
 * Build a feedback request. Enforces the client-side contract: severity in
 * (0, 1], and a verdict is never emitted without the window seq and the
 * parameter version it was formed against.
 */
export function buildVerdict(v: VerdictInputs): {
  cmd: "feedback";
  session: string;
  event: Record<string, unknown>;
} {
  if (!Number.isFinite(v.severity) || v.severity <= 0 || v.severity > 1) {
    throw new RangeError(`severity must be in (0, 1], got ${v.severity}`);
  }
  if (!Number.isInteger(v.windowSeq) || v.windowSeq < 0) {
    throw new RangeError(`window seq required, got ${v.windowSeq}`);
  }
  if (!Number.isInteger(v.thetaVersion) || v.thetaVersion < 0) {
    throw new RangeError(`theta version required, got ${v.thetaVersion}`);
  }
  if (!Number.isInteger(v.markerId) || v.markerId < 0) {
    throw new RangeError(`marker id required, got ${v.markerId}`);
  }
  const event: Record<string, unknown> = {
    event_id: v.eventId ?? `ui-${Date.now()}-${verdictCounter++}`,
    window_seq: v.windowSeq,
    marker_id: v.markerId,
    verdict: v.verdict,
    severity: v.severity,
    theta_version: v.thetaVersion,
    timestamp: Date.now() / 1000,
  };
  if (v.nudge !== undefined) event["nudge"] = v.nudge;
  return { cmd: "feedback", session: v.sessionId, event };
}

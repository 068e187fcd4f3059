/**
 * Interactive terminal console.
 *
 *   node dist/main.js --port 7321 --session bearing-42
 *   node dist/main.js --port 7321 --start --preset bearing --seed 42 --cadence 2
 *
 * Keys: c = confirm the shown marker, d = deny it, q = quit.
 * Feedback is stamped with the displayed window seq and parameter version,
 * sent fire-and-acknowledge; acks render with their fresh/stale flag.
 */
import { parseArgs } from "node:util";
import { LineClient } from "./client.js";
import { buildVerdict, feedbackAckSchema } from "./protocol.js";
import { applyAck, applyGap, applyState, markDisconnected, newView } from "./state.js";
import { renderFrame } from "./render.js";

const CLEAR = "\x1b[2J\x1b[H";
const RECONNECT_DELAY_MS = 1000;

async function main(): Promise<void> {
  const { values } = parseArgs({
    options: {
      host: { type: "string", default: "127.0.0.1" },
      port: { type: "string", default: "7321" },
      session: { type: "string" },
      start: { type: "boolean", default: false },
      preset: { type: "string", default: "bearing" },
      seed: { type: "string", default: "42" },
      cadence: { type: "string", default: "2" },
      severity: { type: "string", default: "1.0" },
    },
  });
  const host = values.host as string;
  const port = Number(values.port);
  const severity = Number(values.severity);

  let sessionId = values.session as string | undefined;
  const client = new LineClient();
  await client.connect(host, port);

  if (values.start || sessionId === undefined) {
    const resp = await client.call({
      cmd: "start",
      preset: values.preset,
      seed: Number(values.seed),
      cadence: Number(values.cadence),
      ...(sessionId !== undefined ? { session: sessionId } : {}),
    });
    sessionId = String(resp["session"]);
  }

  const view = newView(sessionId);
  const redraw = (): void => {
    process.stdout.write(CLEAR + renderFrame(view) + "\n");
  };

  client.onStream((msg) => {
    if (msg.type === "state") applyState(view, msg);
    else applyGap(view, msg);
    redraw();
  });
  client.onInvalid((error) => {
    process.stderr.write(`bad line from service: ${error}\n`);
  });
  client.onStatus((status) => {
    if (status !== "disconnected") return;
    markDisconnected(view);
    redraw();
    setTimeout(async () => {
      try {
        await client.connect(host, port);
        await client.call({ cmd: "subscribe", session: sessionId });
      } catch {
        /* the status handler fires again on the next close */
      }
    }, RECONNECT_DELAY_MS);
  });

  await client.call({ cmd: "subscribe", session: sessionId });
  redraw();

  const sendVerdict = async (verdict: "confirm" | "deny"): Promise<void> => {
    const r = view.lastRecord;
    if (r === null) return;
    const shown = view.markers.find((m) => m.shown);
    if (shown === undefined) return;
    const req = buildVerdict({
      sessionId: view.sessionId,
      markerId: shown.id,
      verdict,
      severity,
      windowSeq: r.seq,
      thetaVersion: view.thetaVersion,
    });
    try {
      const resp = await client.call(req);
      applyAck(view, feedbackAckSchema.parse(resp));
    } catch (e) {
      process.stderr.write(`feedback rejected: ${(e as Error).message}\n`);
    }
    redraw();
  };

  if (process.stdin.isTTY) {
    process.stdin.setRawMode(true);
    process.stdin.resume();
    process.stdin.setEncoding("utf8");
    process.stdin.on("data", (key: string) => {
      if (key === "q" || key === "\x03") {
        client.close();
        process.exit(0);
      }
      if (key === "c") void sendVerdict("confirm");
      if (key === "d") void sendVerdict("deny");
    });
  }
}

main().catch((e) => {
  process.stderr.write(`fatal: ${(e as Error).message}\n`);
  process.exit(1);
});

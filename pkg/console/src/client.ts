/**
 * Line-delimited JSON client for the sci service socket.
 *
 * One socket, one reader. Command responses arrive in request order on the
 * same connection, so a FIFO of pending promises correlates them; state and
 * gap messages are pushed to a stream handler as they interleave.
 */
import * as net from "node:net";
import { GapMsg, ParsedLine, Response, StateMsg, parseLine } from "./protocol.js";

export type StreamHandler = (msg: StateMsg | GapMsg) => void;
export type StatusHandler = (status: "connected" | "disconnected") => void;
export type InvalidHandler = (error: string, raw: string) => void;

interface Pending {
  resolve: (r: Response) => void;
  reject: (e: Error) => void;
}

export class LineClient {
  private socket: net.Socket | null = null;
  private buffer = "";
  private pending: Pending[] = [];
  private streamHandlers: StreamHandler[] = [];
  private statusHandlers: StatusHandler[] = [];
  private invalidHandlers: InvalidHandler[] = [];

  onStream(fn: StreamHandler): void {
    this.streamHandlers.push(fn);
  }

  onStatus(fn: StatusHandler): void {
    this.statusHandlers.push(fn);
  }

  onInvalid(fn: InvalidHandler): void {
    this.invalidHandlers.push(fn);
  }

  get connected(): boolean {
    return this.socket !== null && !this.socket.destroyed;
  }

  connect(host: string, port: number): Promise<void> {
    return new Promise((resolve, reject) => {
      const sock = net.createConnection({ host, port }, () => {
        this.statusHandlers.forEach((h) => h("connected"));
        resolve();
      });
      sock.setEncoding("utf8");
      sock.on("data", (chunk: string) => this.feed(chunk));
      sock.on("error", (err) => {
        if (this.socket === null) reject(err);
        this.failPending(err);
      });
      sock.on("close", () => {
        this.socket = null;
        this.failPending(new Error("connection closed"));
        this.statusHandlers.forEach((h) => h("disconnected"));
      });
      this.socket = sock;
    });
  }

  /** Split the byte stream into lines; dispatch each parsed line. */
  private feed(chunk: string): void {
    this.buffer += chunk;
    for (;;) {
      const nl = this.buffer.indexOf("\n");
      if (nl < 0) break;
      const line = this.buffer.slice(0, nl).trim();
      this.buffer = this.buffer.slice(nl + 1);
      if (line.length === 0) continue;
      this.dispatch(parseLine(line));
    }
  }

  private dispatch(parsed: ParsedLine): void {
    switch (parsed.kind) {
      case "state":
      case "gap":
        this.streamHandlers.forEach((h) => h(parsed.msg));
        break;
      case "response": {
        const waiter = this.pending.shift();
        if (waiter !== undefined) waiter.resolve(parsed.msg);
        break;
      }
      case "invalid":
        this.invalidHandlers.forEach((h) => h(parsed.error, parsed.raw));
        break;
    }
  }

  private failPending(err: Error): void {
    const waiters = this.pending;
    this.pending = [];
    waiters.forEach((w) => w.reject(err));
  }

  /** Send one request object; resolves with the matching response line. */
  request(req: Record<string, unknown>): Promise<Response> {
    const sock = this.socket;
    if (sock === null || sock.destroyed) {
      return Promise.reject(new Error("not connected"));
    }
    return new Promise<Response>((resolve, reject) => {
      this.pending.push({ resolve, reject });
      sock.write(JSON.stringify(req) + "\n");
    });
  }

  /** request() that throws on an ok=false response. */
  async call(req: Record<string, unknown>): Promise<Response> {
    const resp = await this.request(req);
    if (!resp.ok) {
      throw new Error(`${String(req["cmd"])} failed: ${resp.error ?? "unknown error"}`);
    }
    return resp;
  }

  close(): void {
    if (this.socket !== null) {
      this.socket.destroy();
      this.socket = null;
    }
  }
}

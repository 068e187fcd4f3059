"""Local line-JSON service hosting live regulation sessions.

One asyncio TCP listener on a loopback address; every request is a single
JSON object on its own line and earns exactly one JSON response line. A
connection that subscribes also receives push messages (one per control
cycle) interleaved with its command responses; whole lines only, so the
framing survives interleaving.

Contracts kept deliberately strict:

* the session loop never waits on a subscriber — slow consumers get
  oldest-first drops with an explicit gap marker carrying the count;
* a state message embeds the latest audit record verbatim (single source
  of truth: the same dict is serialized to the audit file);
* cadence 0 means single-step mode — the session advances only on `step`;
* feedback acks echo the event id plus the live parameter version, and
  `fresh` tells the operator whether the verdict will be applied or
  silently discarded by the aggregator.

Replays: `start` with a `stream_file` drives the session from a recorded
stream instead of the generator. Stepping such a session through its whole
file reproduces the batch harness's audit file byte for byte, because both
paths share the Session object, the record layout, and the serializer.
"""

from __future__ import annotations

import asyncio
import contextlib
import dataclasses
import json
import logging
import os
from typing import Iterator

from .feedback import FeedbackError
from .presets import Preset, PresetError, build_artifacts, eval_windows, get_preset
from .session import Session, audit_line
from .sigsim import StreamError, read_stream

log = logging.getLogger(__name__)

MSG_SCHEMA = "sci.msg/1"
SUBSCRIBER_CAP = 256
WINDOW_CHUNK = 64

# preset fields a `start` request may override (experiment plumbing only)
OVERRIDABLE = ("n_train", "n_cal", "n_eval", "epochs")


class ServiceError(ValueError):
    pass


def _encode(msg: dict) -> bytes:
    return (json.dumps(msg, sort_keys=True, separators=(",", ":")) + "\n").encode()


class Subscriber:
    """Bounded push queue: drop-oldest, never block, gaps made visible."""

    def __init__(self, writer: asyncio.StreamWriter, cap: int = SUBSCRIBER_CAP):
        self.writer = writer
        self.q: asyncio.Queue[dict] = asyncio.Queue(maxsize=cap)
        self.pending_gap = 0
        self.msg_seq = 0
        self.task: asyncio.Task | None = None

    def _absorb(self, old: dict) -> None:
        if old.get("type") == "gap":
            self.pending_gap += int(old.get("dropped", 0))
        else:
            self.pending_gap += 1

    def push(self, record: dict) -> None:
        if self.q.full():
            self._absorb(self.q.get_nowait())
        # a pending gap needs its own slot next to the drop point
        if self.pending_gap and self.q.qsize() >= self.q.maxsize - 1:
            self._absorb(self.q.get_nowait())
        if self.pending_gap:
            self.msg_seq += 1
            self.q.put_nowait({
                "schema": MSG_SCHEMA, "type": "gap",
                "dropped": self.pending_gap, "msg_seq": self.msg_seq,
            })
            self.pending_gap = 0
        self.msg_seq += 1
        self.q.put_nowait({
            "schema": MSG_SCHEMA, "type": "state",
            "msg_seq": self.msg_seq, "record": record,
        })

    async def pump(self) -> None:
        try:
            while True:
                msg = await self.q.get()
                self.writer.write(_encode(msg))
                await self.writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass

    def close(self) -> None:
        if self.task is not None:
            self.task.cancel()


class LiveSession:
    """One control loop plus its audit file and subscriber fan-out."""

    def __init__(
        self,
        preset: Preset,
        seed: int,
        cadence: float,
        audit_dir: str,
        stream_file: str | None = None,
        session_id: str | None = None,
    ) -> None:
        self.preset = preset
        self.seed = seed
        self.cadence = float(cadence)
        art = build_artifacts(preset, seed)
        self.sess = Session(art, session_id=session_id)
        self._subs: dict[int, Subscriber] = {}
        self._next_sub = 0
        self.loop_task: asyncio.Task | None = None
        self.exhausted = False

        if stream_file is not None:
            _, windows = read_stream(stream_file)
            self._source: Iterator = iter(windows)
            self._chunk_start = None
        else:
            self._source = iter(())
            self._chunk_start = preset.n_train + preset.n_cal

        tag = f"{preset.name}_{seed}"
        self.audit_path = os.path.join(audit_dir, f"audit_{tag}.ndjson")
        self._audit = open(self.audit_path, "w")

    # ------------------------------------------------------------------
    def _next_window(self):
        w = next(self._source, None)
        if w is None and self._chunk_start is not None:
            chunk = eval_windows(self.preset, self.seed, n=WINDOW_CHUNK,
                                 start_seq=self._chunk_start)
            self._chunk_start += WINDOW_CHUNK
            self._source = iter(chunk)
            w = next(self._source, None)
        return w

    def step(self, n: int = 1) -> dict:
        stepped = 0
        record = self.sess.last_record
        for _ in range(n):
            w = self._next_window()
            if w is None:
                self.exhausted = True
                break
            record = self.sess.cycle(w)
            self._audit.write(audit_line(record) + "\n")
            stepped += 1
            for sub in self._subs.values():
                sub.push(record)
        if stepped:
            self._audit.flush()
        return {"stepped": stepped, "exhausted": self.exhausted,
                "record": record}

    async def run_loop(self) -> None:
        period = 1.0 / self.cadence
        try:
            while not self.exhausted:
                self.step(1)
                await asyncio.sleep(period)
        except asyncio.CancelledError:
            pass

    # ------------------------------------------------------------------
    def state(self) -> str:
        if self.exhausted:
            return "done"
        if self.loop_task is not None and not self.loop_task.done():
            return "running"
        return "idle"

    def status(self) -> dict:
        rec = self.sess.last_record
        return {
            "session": self.sess.session_id,
            "preset": self.preset.name,
            "seed": self.seed,
            "state": self.state(),
            "cadence": self.cadence,
            "theta_version": self.sess.theta_version,
            "cycles": self.sess.cycles,
            "subscribers": len(self._subs),
            "buffer_len": len(self.sess.buffer),
            "audit_path": self.audit_path,
            "sp": None if rec is None else rec["sp"],
            "delta_sp": None if rec is None else rec["delta_sp"],
        }

    def attach(self, writer: asyncio.StreamWriter) -> int:
        sub = Subscriber(writer)
        sub.task = asyncio.get_running_loop().create_task(sub.pump())
        self._next_sub += 1
        self._subs[self._next_sub] = sub
        return self._next_sub

    def detach(self, sub_id: int) -> None:
        sub = self._subs.pop(sub_id, None)
        if sub is not None:
            sub.close()

    def close(self) -> None:
        if self.loop_task is not None:
            self.loop_task.cancel()
        for sub in list(self._subs.values()):
            sub.close()
        self._subs.clear()
        self._audit.close()


class Service:
    """Command dispatch over many connections, sessions fully isolated."""

    def __init__(self, audit_dir: str = ".") -> None:
        self.audit_dir = audit_dir
        self.sessions: dict[str, LiveSession] = {}
        self.server: asyncio.AbstractServer | None = None
        self.closing = asyncio.Event()

    # ------------------------------------------------------------------
    def _get(self, req: dict) -> LiveSession:
        sid = req.get("session")
        live = self.sessions.get(sid)
        if live is None:
            raise ServiceError(f"unknown session {sid!r}")
        return live

    async def _cmd_start(self, req: dict, _writer) -> dict:
        name = req.get("preset")
        preset = get_preset(name)
        for field in OVERRIDABLE:
            if field in req:
                preset = dataclasses.replace(preset, **{field: int(req[field])})
        seed = int(req.get("seed", 0))
        sid = req.get("session") or f"{preset.name}-{seed}"
        if sid in self.sessions:
            raise ServiceError(f"session {sid!r} already exists")
        cadence = float(req.get("cadence", 0.0))
        stream_file = req.get("stream_file")
        live = await asyncio.to_thread(
            LiveSession, preset, seed, cadence, self.audit_dir,
            stream_file, sid,
        )
        self.sessions[sid] = live
        if cadence > 0:
            live.loop_task = asyncio.get_running_loop().create_task(live.run_loop())
        return {"session": sid, "state": live.state(),
                "theta_version": live.sess.theta_version,
                "audit_path": live.audit_path}

    async def _cmd_step(self, req: dict, _writer) -> dict:
        live = self._get(req)
        if live.cadence > 0:
            raise ServiceError("session is free-running; step applies to cadence 0")
        n = int(req.get("n", 1))
        out = live.step(n)
        return {"session": live.sess.session_id, "stepped": out["stepped"],
                "exhausted": out["exhausted"],
                "theta_version": live.sess.theta_version}

    async def _cmd_status(self, req: dict, _writer) -> dict:
        return self._get(req).status()

    async def _cmd_subscribe(self, req: dict, writer) -> dict:
        live = self._get(req)
        sub_id = live.attach(writer)
        return {"session": live.sess.session_id, "subscriber": sub_id}

    async def _cmd_unsubscribe(self, req: dict, _writer) -> dict:
        live = self._get(req)
        live.detach(int(req.get("subscriber", -1)))   # idempotent
        return {"session": live.sess.session_id}

    async def _cmd_feedback(self, req: dict, _writer) -> dict:
        live = self._get(req)
        ack = live.sess.submit_feedback(req.get("event") or {})
        return {"session": live.sess.session_id, **ack}

    async def _cmd_stop(self, req: dict, _writer) -> dict:
        live = self._get(req)
        del self.sessions[live.sess.session_id]
        live.close()
        return {"session": live.sess.session_id, "state": "stopped"}

    async def _cmd_shutdown(self, req: dict, _writer) -> dict:
        self.closing.set()
        return {"closing": True}

    # ------------------------------------------------------------------
    async def handle(self, reader: asyncio.StreamReader,
                     writer: asyncio.StreamWriter) -> None:
        attached: list[tuple[LiveSession, int]] = []
        try:
            while True:
                line = await reader.readline()
                if not line:
                    break
                text = line.decode().strip()
                if not text:
                    continue
                try:
                    req = json.loads(text)
                    cmd = req.get("cmd")
                    fn = getattr(self, f"_cmd_{cmd}", None)
                    if fn is None:
                        raise ServiceError(f"unknown command {cmd!r}")
                    body = await fn(req, writer)
                    if cmd == "subscribe":
                        attached.append((self._get(req), body["subscriber"]))
                    resp = {"schema": MSG_SCHEMA, "ok": True,
                            "cmd": cmd, **body}
                except json.JSONDecodeError as e:
                    resp = {"schema": MSG_SCHEMA, "ok": False,
                            "error": f"parse error at position {e.pos}"}
                except (ServiceError, PresetError, FeedbackError,
                        StreamError, ValueError) as e:
                    resp = {"schema": MSG_SCHEMA, "ok": False,
                            "cmd": req.get("cmd") if isinstance(req, dict) else None,
                            "error": str(e)}
                writer.write(_encode(resp))
                await writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            for live, sub_id in attached:
                with contextlib.suppress(Exception):
                    live.detach(sub_id)
            with contextlib.suppress(Exception):
                writer.close()

    # ------------------------------------------------------------------
    async def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        self.server = await asyncio.start_server(self.handle, host, port)
        return self.server.sockets[0].getsockname()[1]

    async def wait_closed(self) -> None:
        await self.closing.wait()
        await self.close()

    async def close(self) -> None:
        for sid in list(self.sessions):
            live = self.sessions.pop(sid)
            live.close()
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()


async def _serve(host: str, port: int, audit_dir: str) -> None:
    svc = Service(audit_dir=audit_dir)
    bound = await svc.start(host, port)
    print(f"listening on {host}:{bound}", flush=True)
    try:
        await svc.wait_closed()
    finally:
        await svc.close()


def serve(host: str = "127.0.0.1", port: int = 7321,
          audit_dir: str = ".") -> None:
    """Blocking entry point used by the command line."""
    asyncio.run(_serve(host, port, audit_dir))

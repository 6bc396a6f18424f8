"""HTTP session service for the operator console.

One session wraps one closed-loop run: the loop executes on a worker
thread, every plant step and transcript event fans out to streaming
subscribers as line-delimited JSON, and operator commands enter
through a queue only the loop thread consumes, so no interleaving of
requests can tear the session state.

Wire format, shared with the console:
  stream line  {"type": <kind>, "seq": n, "payload": {"t": ..., ...}}
  snapshot     SessionDescriptor JSON (GET /snapshot)
  commands     POST /command {"command": accept|reject|scram|pause|
               resume|set-speed, "speed"?: float}
  margin table GET /recommendation; transcript GET /transcript
"""

from __future__ import annotations

import json
import queue
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .loop import DiscrepancyConfig, Timeline, run_closed_loop
from .plant import CHANNELS, PlantConfig, ScenarioSpec
from .twins import TwinBundle

PHASES = ("steady", "transient", "paused", "post-action", "terminated")

_EVENT_PHASE = {
    "steady": "steady",
    "fault": "transient",
    "diagnosis": "paused",
    "decision": "post-action",
    "outcome": "terminated",
}


class Session:
    """One plant run, one loop thread, any number of observers."""

    def __init__(self, spec: ScenarioSpec, bundle: TwinBundle,
                 config: PlantConfig | None = None,
                 timeline: Timeline | None = None, policy: str = "gated",
                 discrepancy: DiscrepancyConfig | None = None,
                 check_enabled: bool = True, speed: float = 20.0,
                 diag_bound: float = 30.0):
        config = config or PlantConfig()
        if bundle.config_hash and bundle.config_hash != config.config_hash():
            raise ValueError("bundle plant-config hash does not match the "
                             "session's plant config; refusing to serve")
        bundle.require_complete()
        self.spec = spec
        self.bundle = bundle
        self.config = config
        self.timeline = timeline or Timeline()
        self.policy = policy
        self.discrepancy = discrepancy or DiscrepancyConfig()
        self.check_enabled = check_enabled
        self.diag_bound = diag_bound

        self._lock = threading.Lock()
        self._commands: queue.Queue = queue.Queue()
        self._subscribers: list[queue.Queue] = []
        self._seq = 0
        self._phase = "steady"
        self._speed = float(speed)
        self._paused_by_operator = False
        self._awaiting_decision = False
        self._latest: dict = {}
        self._plant: dict = {}
        self._transcript_lines: list[str] = []
        self._thread: threading.Thread | None = None
        self.log = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        if self._thread is not None:
            raise RuntimeError("session already started")
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def join(self, timeout=None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def _run(self) -> None:
        try:
            self.log = run_closed_loop(
                self.spec, self.bundle, self.config, self.timeline,
                policy=self.policy, discrepancy=self.discrepancy,
                check_enabled=self.check_enabled,
                decision_fn=self._decide if self.policy == "gated" else None,
                diag_bound=self.diag_bound, observer=self._observe)
        except Exception as exc:
            with self._lock:
                self._phase = "terminated"
            self._fan_out("error", {"message": str(exc)})
        finally:
            with self._lock:
                self._phase = "terminated"
            self._fan_out("end", {})

    # -- loop-side hooks (only the loop thread runs these) ------------------

    def _observe(self, kind: str, t: float, data: dict):
        if kind == "tick":
            self._plant = {"t": t, **data}
            verdict = self._pump_commands()
            self._fan_out("tick", {"t": t, **data})
            self._pace()
            return verdict
        with self._lock:
            self._latest[kind] = {"t": t, **data}
            if kind in _EVENT_PHASE:
                self._phase = _EVENT_PHASE[kind]
        self._transcript_lines.append(json.dumps(
            {"seq": len(self._transcript_lines), "t": t, "kind": kind,
             "data": data}, sort_keys=True))
        self._fan_out(kind, {"t": t, **data})
        return None

    def _decide(self, recommendation) -> str:
        with self._lock:
            self._awaiting_decision = True
            self._phase = "paused"
        self._fan_out("awaiting-decision", {"scram": recommendation.scram})
        try:
            while True:
                cmd, arg = self._commands.get()
                if cmd in ("accept", "reject", "scram"):
                    return cmd
                if cmd == "set-speed":
                    self._set_speed(arg)
                # pause/resume are meaningless while already paused
        finally:
            with self._lock:
                self._awaiting_decision = False

    def _pump_commands(self):
        verdict = None
        while True:
            try:
                cmd, arg = self._commands.get_nowait()
            except queue.Empty:
                break
            if cmd == "scram":
                verdict = "scram"
            elif cmd == "pause":
                self._paused_by_operator = True
            elif cmd == "resume":
                self._paused_by_operator = False
            elif cmd == "set-speed":
                self._set_speed(arg)
            else:
                self._fan_out("stale-command", {"command": cmd})
        while self._paused_by_operator and verdict is None:
            time.sleep(0.02)
            try:
                cmd, arg = self._commands.get_nowait()
            except queue.Empty:
                continue
            if cmd == "scram":
                verdict = "scram"
            elif cmd == "resume":
                self._paused_by_operator = False
            elif cmd == "set-speed":
                self._set_speed(arg)
        return verdict

    def _set_speed(self, value) -> None:
        try:
            v = float(value)
        except (TypeError, ValueError):
            return
        if v >= 0.0:
            with self._lock:
                self._speed = v

    def _pace(self) -> None:
        with self._lock:
            speed = self._speed
        if speed > 0.0:
            time.sleep(self.config.dt / speed)

    # -- request-side API (any handler thread) ------------------------------

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=4096)
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def _fan_out(self, kind: str, payload: dict) -> None:
        with self._lock:
            self._seq += 1
            msg = json.dumps({"type": kind, "seq": self._seq,
                              "payload": payload}, sort_keys=True)
            subs = list(self._subscribers)
        for q in subs:
            try:
                q.put_nowait(msg)
            except queue.Full:
                self.unsubscribe(q)

    def command(self, name: str, arg=None) -> dict:
        valid = ("accept", "reject", "scram", "pause", "resume", "set-speed")
        if name not in valid:
            return {"ok": False, "error": f"unknown command {name!r}"}
        with self._lock:
            phase = self._phase
            awaiting = self._awaiting_decision
        if phase == "terminated":
            return {"ok": False, "error": "session already terminated"}
        if name in ("accept", "reject") and not awaiting:
            return {"ok": False,
                    "error": f"{name} only applies while a decision is pending"}
        if name == "set-speed":
            try:
                if float(arg) < 0.0:
                    raise ValueError
            except (TypeError, ValueError):
                return {"ok": False, "error": "set-speed needs a speed >= 0"}
        self._commands.put((name, arg))
        return {"ok": True, "queued": name}

    def snapshot(self) -> dict:
        with self._lock:
            rec = self._latest.get("recommendation")
            out = self._latest.get("outcome")
            return {
                "session": {
                    "phase": self._phase,
                    "policy": self.policy,
                    "speed": self._speed,
                    "paused_by_operator": self._paused_by_operator,
                    "awaiting_decision": self._awaiting_decision,
                },
                "scenario": {
                    "w1_end": self.spec.w1_end,
                    "ramp_duration": self.spec.ramp_duration,
                    "t_acc": self.spec.t_acc,
                    "coastdown_rate": self.spec.coastdown_rate,
                },
                "timeline": {
                    "steady_wait": self.timeline.steady_wait,
                    "accident_time": self.timeline.accident_time,
                    "recommend_time": self.timeline.recommend_time,
                },
                "bundle": {
                    "config_hash": self.bundle.config_hash,
                    "limit": self.bundle.limit,
                    "grid_n": self.bundle.grid_n,
                    "bounds": [self.bundle.bounds.w2_min,
                               self.bundle.bounds.w2_max,
                               self.bundle.bounds.trip_min,
                               self.bundle.bounds.trip_max],
                },
                "channels": list(CHANNELS),
                "plant": dict(self._plant),
                "recommendation": rec,
                "outcome": out,
            }

    def recommendation(self) -> dict | None:
        with self._lock:
            rec = self._latest.get("recommendation")
            table = self._latest.get("assessment")
        if rec is None:
            return None
        return {"recommendation": rec, "table": table}

    def transcript_text(self) -> str:
        if self.log is not None:
            return self.log.to_jsonl()
        lines = list(self._transcript_lines)
        return "\n".join(lines) + ("\n" if lines else "")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "reactortwin"

    def log_message(self, fmt, *args):
        pass

    @property
    def session(self) -> Session:
        return self.server.session

    def _send_json(self, obj, status: int = 200) -> None:
        body = json.dumps(obj, sort_keys=True).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/snapshot":
            self._send_json(self.session.snapshot())
        elif self.path == "/recommendation":
            rec = self.session.recommendation()
            if rec is None:
                self._send_json({"error": "no recommendation yet"}, 404)
            else:
                self._send_json(rec)
        elif self.path == "/transcript":
            body = self.session.transcript_text().encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/x-ndjson")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)
        elif self.path == "/stream":
            self._stream()
        else:
            self._send_json({"error": f"no route {self.path}"}, 404)

    def _stream(self):
        q = self.session.subscribe()
        try:
            self.send_response(200)
            self.send_header("Content-Type", "application/x-ndjson")
            self.send_header("Cache-Control", "no-store")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Transfer-Encoding", "chunked")
            self.end_headers()
            while True:
                try:
                    msg = q.get(timeout=1.0)
                except queue.Empty:
                    if self.session.snapshot()["session"]["phase"] == "terminated":
                        break
                    continue
                data = (msg + "\n").encode()
                self.wfile.write(f"{len(data):x}\r\n".encode())
                self.wfile.write(data + b"\r\n")
                self.wfile.flush()
                if msg.startswith('{"') and '"type": "end"' in msg:
                    break
            self.wfile.write(b"0\r\n\r\n")
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            self.session.unsubscribe(q)

    def do_POST(self):
        if self.path != "/command":
            self._send_json({"error": f"no route {self.path}"}, 404)
            return
        try:
            n = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(n) or b"{}")
            name = body.get("command", "")
            arg = body.get("speed")
        except (ValueError, json.JSONDecodeError):
            self._send_json({"ok": False, "error": "malformed JSON body"}, 400)
            return
        result = self.session.command(name, arg)
        self._send_json(result, 200 if result["ok"] else 409)

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()


class SessionServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, session: Session, address):
        self.session = session
        super().__init__(address, _Handler)

    def shutdown_session(self) -> None:
        self.session.command("scram")
        self.shutdown()


def make_server(session: Session, port: int = 0,
                host: str = "127.0.0.1") -> SessionServer:
    return SessionServer(session, (host, port))

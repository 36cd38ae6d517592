"""Deployment loop: the /eval_vln service, a PD-controlled unicycle robot and a session logger."""
from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .grammar import GrammarError, Instruction, parse_instruction
from .policy import HistoryContext, Policy, emit_progress
from .worldsim import (FORWARD_STEP, TURN_ANGLE, AgentPose, FloorPlan, NavAction, Observation, observe,
                       step, wrap_angle)

WIRE_VERSION = 1
CONTROL_HZ = 10.0
APPROACH_SWITCH = 0.05  # m; closer than this a forward move holds the target heading


class ControlFault(RuntimeError):
    """The PD loop failed to settle on its target before the timeout."""


class ProtocolError(ValueError):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


# -- PD control --------------------------------------------------------------------------

@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    heading: float
    timestamp: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.heading, self.timestamp)):
            raise ValueError("robot state must be finite")

    @classmethod
    def from_pose(cls, pose: AgentPose, timestamp: float = 0.0) -> "RobotState":
        return cls(pose.x, pose.y, pose.heading, timestamp)

    def pose(self) -> AgentPose:
        return AgentPose(self.x, self.y, self.heading)


@dataclass(frozen=True)
class VelocityCommand:
    linear: float
    angular: float


@dataclass(frozen=True)
class PDGains:
    kp_linear: float = 2.0
    kd_linear: float = 0.0
    kp_yaw: float = 1.5
    kd_yaw: float = 0.0
    max_linear: float = 0.6
    max_angular: float = 0.5


DEFAULT_GAINS = PDGains()


def _clamp(v: float, lim: float) -> float:
    return max(-lim, min(lim, v))


def tracking_errors(state: RobotState, target) -> tuple[float, float]:
    """(position error along the robot's heading, wrapped yaw error) toward target (x, y, heading)."""
    dx, dy = target[0] - state.x, target[1] - state.y
    along = dx * math.cos(state.heading) + dy * math.sin(state.heading)
    return along, float(wrap_angle(target[2] - state.heading))


def pd_step(state: RobotState, target, dt: float = 1.0 / CONTROL_HZ, prev_errors=None,
            gains: PDGains = DEFAULT_GAINS) -> VelocityCommand:
    e_lin, e_yaw = tracking_errors(state, target)
    d_lin = d_yaw = 0.0
    if prev_errors is not None and dt > 0:
        d_lin = (e_lin - prev_errors[0]) / dt
        d_yaw = (e_yaw - prev_errors[1]) / dt
    lin = _clamp(gains.kp_linear * e_lin + gains.kd_linear * d_lin, gains.max_linear)
    ang = _clamp(gains.kp_yaw * e_yaw + gains.kd_yaw * d_yaw, gains.max_angular)
    return VelocityCommand(lin, ang)


def integrate(state: RobotState, cmd: VelocityCommand, dt: float) -> RobotState:
    """Unicycle kinematics with the command held for dt (velocity tracked instantly)."""
    h = state.heading
    return RobotState(state.x + cmd.linear * math.cos(h) * dt, state.y + cmd.linear * math.sin(h) * dt,
                      (h + cmd.angular * dt) % (2 * math.pi), state.timestamp + dt)


def action_target(state, action: NavAction):
    """Target pose (x, y, heading) that one discrete action asks for from the given pose."""
    x, y, h = state[0], state[1], state[2]
    if action == NavAction.MOVE_FORWARD:
        return (x + FORWARD_STEP * math.cos(h), y + FORWARD_STEP * math.sin(h), h)
    if action == NavAction.TURN_LEFT:
        return (x, y, (h + TURN_ANGLE) % (2 * math.pi))
    if action == NavAction.TURN_RIGHT:
        return (x, y, (h - TURN_ANGLE) % (2 * math.pi))
    return (x, y, h)


@dataclass
class Execution:
    states: list[RobotState]
    commands: list[VelocityCommand]
    target: tuple
    position_error: float
    yaw_error: float

    @property
    def final(self) -> RobotState:
        return self.states[-1]


def execute_action(state: RobotState, action: NavAction, target=None, gains: PDGains = DEFAULT_GAINS,
                   hz: float = CONTROL_HZ, converge_pos: float = 0.02, converge_yaw: float = 0.02,
                   timeout: float = 5.0, accept_pos: float = 0.1, accept_yaw: float = 0.1) -> Execution:
    """Run the PD loop until the action's target pose is reached.

    target defaults to the pose the action asks for relative to the current
    state; a caller that tracks the nominal pose chain passes it explicitly so
    residual errors do not accumulate across actions.
    """
    action = NavAction(action)
    if target is None:
        target = action_target((state.x, state.y, state.heading), action)
    if action == NavAction.STOP:
        return Execution([state], [], tuple(target), 0.0, 0.0)
    dt = 1.0 / hz
    states, cmds = [state], []
    prev = None
    for _ in range(int(round(timeout * hz))):
        pos_err = math.hypot(target[0] - state.x, target[1] - state.y)
        yaw_err = abs(float(wrap_angle(target[2] - state.heading)))
        if pos_err < converge_pos and yaw_err < converge_yaw:
            break
        ref = target
        if action == NavAction.MOVE_FORWARD and pos_err > APPROACH_SWITCH:
            # aim at the target point while translating so lateral offsets shrink too
            bearing = math.atan2(target[1] - state.y, target[0] - state.x)
            if abs(float(wrap_angle(bearing - target[2]))) < math.pi / 2:
                ref = (target[0], target[1], bearing)
        cmd = pd_step(state, ref, dt, prev, gains)
        prev = tracking_errors(state, ref)
        state = integrate(state, cmd, dt)
        states.append(state)
        cmds.append(cmd)
    pos_err = math.hypot(target[0] - state.x, target[1] - state.y)
    yaw_err = abs(float(wrap_angle(target[2] - state.heading)))
    if not (pos_err < converge_pos and yaw_err < converge_yaw):
        raise ControlFault(f"{action.name} did not converge within {timeout} s "
                           f"(position error {pos_err:.3f} m, yaw error {yaw_err:.3f} rad)")
    if not (pos_err < accept_pos and yaw_err < accept_yaw):
        raise ControlFault(f"{action.name} settled outside tolerance")
    return Execution(states, cmds, tuple(target), pos_err, yaw_err)


def execute_sequence(state: RobotState, actions, plan: FloorPlan | None = None, **kw):
    """Execute actions against a nominal pose chain; returns (executions, tracking error ratio).

    The nominal chain applies each action to the previous nominal pose (through
    the simulator when a plan is given, so walls truncate forward moves).  The
    tracking error ratio is the final distance between executed and nominal
    positions divided by the nominal path length.
    """
    nominal = (state.x, state.y, state.heading)
    execs, length = [], 0.0
    for a in actions:
        a = NavAction(a)
        if plan is not None:
            nxt = step(plan, AgentPose(*nominal), a)
            target = (nxt.x, nxt.y, nxt.heading)
        else:
            target = action_target(nominal, a)
        length += math.hypot(target[0] - nominal[0], target[1] - nominal[1])
        ex = execute_action(state, a, target, **kw)
        execs.append(ex)
        state = ex.final
        nominal = target
    drift = math.hypot(state.x - nominal[0], state.y - nominal[1])
    return execs, (drift / length if length > 0 else 0.0)


# -- wire protocol -----------------------------------------------------------------------

def dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass
class WireRequest:
    session_id: str
    reset: bool
    instruction: str | None
    observation: Observation

    @classmethod
    def parse(cls, body: bytes, num_rays: int, num_categories: int, max_range: float) -> "WireRequest":
        try:
            d = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(400, f"malformed JSON: {exc.__class__.__name__}") from None
        if not isinstance(d, dict):
            raise ProtocolError(400, "request must be a JSON object")
        v = d.get("v", WIRE_VERSION)
        if v != WIRE_VERSION:
            raise ProtocolError(400, f"unsupported protocol version {v!r}")
        sid = d.get("session_id")
        if not isinstance(sid, str) or not sid:
            raise ProtocolError(400, "session_id must be a non-empty string")
        reset = d.get("reset", False)
        if not isinstance(reset, bool):
            raise ProtocolError(400, "reset must be a boolean")
        instr = d.get("instruction")
        if reset and not isinstance(instr, str):
            raise ProtocolError(400, "instruction is required when reset is true")
        obs = d.get("observation")
        rays = obs.get("rays") if isinstance(obs, dict) else None
        if not isinstance(rays, list) or len(rays) != num_rays:
            raise ProtocolError(400, f"observation.rays must list {num_rays} rays")
        for r in rays:
            ok = (isinstance(r, list) and len(r) == 2 and isinstance(r[0], (int, float))
                  and not isinstance(r[0], bool) and math.isfinite(r[0]) and 0 < r[0] <= max_range
                  and (r[1] is None or (isinstance(r[1], int) and not isinstance(r[1], bool)
                                        and 0 <= r[1] < num_categories)))
            if not ok:
                raise ProtocolError(400, "each ray must be [depth in (0, R_max], category id or null]")
        return cls(sid, reset, instr, Observation.from_wire(rays))


@dataclass
class Session:
    instruction: Instruction
    history: HistoryContext
    t: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)


class PolicyService:
    """Stateful request handler; HTTP is a thin layer on top of handle()."""

    def __init__(self, policy: Policy, latency: float = 0.0, logger: "SessionLogger | None" = None,
                 clock=time.time):
        self.policy = policy
        self.latency = latency
        self.logger = logger
        self.clock = clock
        self.sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def handle(self, body: bytes) -> dict:
        cfg = self.policy.cfg
        req = WireRequest.parse(body, cfg.num_rays, cfg.num_categories, cfg.max_range)
        if req.reset:
            try:
                instr = parse_instruction(req.instruction)
            except GrammarError as exc:
                raise ProtocolError(400, f"instruction does not parse: {exc}") from None
            if instr.K > cfg.k_max:
                raise ProtocolError(400, f"instruction has {instr.K} sub-goals, more than {cfg.k_max}")
            sess = Session(instr, HistoryContext(instr, cfg))
            with self._lock:
                self.sessions[req.session_id] = sess
            with sess.lock:
                return self._step(req.session_id, sess, req.observation, first=True)
        with self._lock:
            sess = self.sessions.get(req.session_id)
        if sess is None:
            raise ProtocolError(404, f"unknown session {req.session_id!r}; send reset first")
        with sess.lock:
            return self._step(req.session_id, sess, req.observation, first=False)

    def _step(self, sid: str, sess: Session, obs: Observation, first: bool) -> dict:
        if not first:
            sess.t += 1
        sess.history.push(sess.t, obs)
        out = self.policy.run(sess.history)
        action = NavAction(int(np.argmax(out.action_logits)))
        _, progress = emit_progress(out.progress_logits, sess.instruction, self.policy.cfg.k_max)
        if first:
            progress = ""  # no sub-goal can be complete before the first move
        if self.latency > 0:
            time.sleep(self.latency)
        resp = {"v": WIRE_VERSION, "action": int(action), "action_name": action.name, "progress": progress}
        if self.logger is not None:
            rec = {"timestamp": self.clock(), "t": sess.t, "pose": None, "observation": obs.to_wire(),
                   "observation_ref": f"{sid}/{sess.t}", "action": int(action), "progress": progress}
            if first:
                rec["instruction"] = sess.instruction.text
            self.logger.log(sid, rec)
        return resp

    def handle_http(self, method: str, path: str, body: bytes = b"") -> tuple[int, bytes]:
        """Status and body bytes for one HTTP exchange."""
        if method == "GET" and path == "/healthz":
            return 200, dumps({"status": "ok", "v": WIRE_VERSION})
        if path != "/eval_vln":
            return 404, dumps({"error": f"no route {path}", "v": WIRE_VERSION})
        if method != "POST":
            return 405, dumps({"error": "use POST", "v": WIRE_VERSION})
        try:
            return 200, dumps(self.handle(body))
        except ProtocolError as exc:
            return exc.status, dumps({"error": exc.message, "v": WIRE_VERSION})


def _handler_for(service: PolicyService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _send(self, status: int, body: bytes):
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            self._send(*service.handle_http("GET", self.path))

        def do_POST(self):
            n = int(self.headers.get("Content-Length") or 0)
            self._send(*service.handle_http("POST", self.path, self.rfile.read(n)))

        def log_message(self, fmt, *args):
            pass

    return Handler


def serve(service: PolicyService, host: str = "127.0.0.1", port: int = 0,
          background: bool = True) -> ThreadingHTTPServer:
    """Bind the service; with background=True it runs on a daemon thread (port 0 picks a free one)."""
    server = ThreadingHTTPServer((host, port), _handler_for(service))
    server.daemon_threads = True
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
    else:
        server.serve_forever()
    return server


class HttpClient:
    """Minimal JSON client for the service (stdlib http.client)."""

    def __init__(self, host: str, port: int):
        import http.client

        self.conn = http.client.HTTPConnection(host, port, timeout=30)

    def post(self, path: str, body: bytes) -> tuple[int, bytes]:
        self.conn.request("POST", path, body=body, headers={"Content-Type": "application/json"})
        r = self.conn.getresponse()
        return r.status, r.read()

    def get(self, path: str) -> tuple[int, bytes]:
        self.conn.request("GET", path)
        r = self.conn.getresponse()
        return r.status, r.read()

    def close(self):
        self.conn.close()


# -- logging -----------------------------------------------------------------------------

class SessionLogger:
    """Appends one JSON line per step to <dir>/<session>.jsonl with strictly increasing timestamps."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._last: dict[str, float] = {}
        self._lock = threading.Lock()

    def path(self, session_id: str) -> Path:
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in session_id)
        return self.dir / f"{safe}.jsonl"

    def log(self, session_id: str, record: dict) -> None:
        with self._lock:
            ts = float(record["timestamp"])
            last = self._last.get(session_id)
            if last is not None and ts <= last:
                ts = math.nextafter(last, math.inf)
            self._last[session_id] = ts
            rec = dict(record, timestamp=ts)
            with open(self.path(session_id), "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def log_session(session_id: str, records, directory) -> Path:
    logger = SessionLogger(directory)
    for r in records:
        logger.log(session_id, r)
    return logger.path(session_id)


def read_log(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


def replay_log(policy: Policy, path) -> list[int]:
    """Re-run logged observations through a fresh session; returns the actions produced."""
    recs = read_log(path)
    if not recs:
        return []
    svc = PolicyService(policy)
    out = []
    for i, r in enumerate(recs):
        req = {"v": WIRE_VERSION, "session_id": "replay", "reset": i == 0,
               "observation": {"rays": r["observation"]}}
        if i == 0:
            req["instruction"] = r["instruction"]
        out.append(svc.handle(dumps(req))["action"])
    return out


# -- simulated robot ---------------------------------------------------------------------

@dataclass
class RobotRun:
    states: list[RobotState]
    actions: list[int]
    progress: list[str]
    tracking_error: float
    log_path: str | None = None


def run_robot(send, episode, plan: FloorPlan, session_id: str = "robot", max_steps: int = 200,
              logger: SessionLogger | None = None) -> RobotRun:
    """Closed loop: observe at the robot pose, ask the service, execute with the PD controller.

    send(request_dict) -> response_dict, either in-process or over HTTP.
    """
    state = RobotState.from_pose(episode.start)
    nominal = episode.start
    states, actions, progress = [state], [], []
    length = 0.0
    text = episode.instruction.text
    for t in range(max_steps):
        obs = observe(plan, AgentPose(state.x, state.y, state.heading))
        req = {"v": WIRE_VERSION, "session_id": session_id, "reset": t == 0,
               "observation": {"rays": obs.to_wire()}}
        if t == 0:
            req["instruction"] = text
        resp = send(req)
        a = NavAction(int(resp["action"]))
        actions.append(int(a))
        progress.append(resp["progress"])
        if logger is not None:
            rec = {"timestamp": state.timestamp, "t": t, "pose": [state.x, state.y, state.heading],
                   "observation": obs.to_wire(), "observation_ref": f"{session_id}/{t}",
                   "action": int(a), "progress": resp["progress"]}
            if t == 0:
                rec["instruction"] = text
            logger.log(session_id, rec)
        if a == NavAction.STOP:
            break
        nxt = step(plan, nominal, a)
        length += math.hypot(nxt.x - nominal.x, nxt.y - nominal.y)
        ex = execute_action(state, a, (nxt.x, nxt.y, nxt.heading))
        states.extend(ex.states[1:])
        state = ex.final
        nominal = nxt
    drift = math.hypot(state.x - nominal.x, state.y - nominal.y)
    return RobotRun(states, actions, progress, drift / length if length > 0 else 0.0,
                    str(logger.path(session_id)) if logger is not None else None)


def local_sender(service: PolicyService):
    def send(req: dict) -> dict:
        return service.handle(dumps(req))
    return send


def http_sender(client: HttpClient):
    def send(req: dict) -> dict:
        status, body = client.post("/eval_vln", dumps(req))
        d = json.loads(body)
        if status != 200:
            raise ProtocolError(status, d.get("error", "request failed"))
        return d
    return send

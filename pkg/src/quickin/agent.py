"""Background user application: proximity detection and session driving.

Everything here reacts to advertisements and the clock. There is no
operation that stands for a rider gesture; after registration the rider
only moves around.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from .api import ApiRequest, ApiResponse
from .domain import ServiceKind
from .errors import InvalidInputError
from .station import Advertisement, GateCommand

IN_RANGE = "in_range"
OUT_OF_RANGE = "out_of_range"

IDLE = "idle"
IN_SESSION = "in_session"
AWAITING_TURNSTILE = "awaiting_turnstile"


@dataclass(frozen=True)
class ProximityConfig:
    rssi_threshold_dbm: float = -75.0
    sample_period: float = 5.0
    loss_timeout: float = 30.0
    # a gate session with no exit reading is closed after this long
    gate_timeout: float = 4 * 3600.0

    def __post_init__(self):
        if not (self.loss_timeout > self.sample_period > 0):
            raise InvalidInputError("need loss_timeout > sample_period > 0")
        if self.gate_timeout < self.loss_timeout:
            raise InvalidInputError("gate_timeout must not be shorter than loss_timeout")


@dataclass
class PathLossModel:
    """Log-distance path loss with optional Gaussian shadowing."""

    tx_power_dbm: float = -59.0
    exponent: float = 2.0
    noise_sigma_dbm: float = 0.0
    rng_seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.exponent <= 0:
            raise InvalidInputError("path loss exponent must be positive")
        self.rng = np.random.default_rng(self.rng_seed)


def rssi_from_distance(model: PathLossModel, d: float) -> float:
    d = max(float(d), 0.1)
    rssi = model.tx_power_dbm - 10.0 * model.exponent * math.log10(d)
    if model.noise_sigma_dbm > 0:
        rssi += float(model.rng.normal(0.0, model.noise_sigma_dbm))
    return rssi


def detection_range_m(tx_power_dbm: float, threshold_dbm: float, exponent: float) -> float:
    """Distance at which a noiseless signal crosses the threshold."""
    return 10.0 ** ((tx_power_dbm - threshold_dbm) / (10.0 * exponent))


@dataclass(frozen=True)
class RssiSample:
    station_id: str
    rssi_dbm: float
    at: float
    advertisement: Advertisement


def classify(sample: RssiSample, config: ProximityConfig) -> str:
    return IN_RANGE if sample.rssi_dbm >= config.rssi_threshold_dbm else OUT_OF_RANGE


# protocol actions -----------------------------------------------------------

@dataclass(frozen=True)
class StartSession:
    station_id: str
    sample: RssiSample
    sample_period: float


@dataclass(frozen=True)
class UpdateSession:
    session_id: Optional[str]
    sample: RssiSample


@dataclass(frozen=True)
class MissingData:
    session_id: str
    missed_windows: int
    at: float


@dataclass(frozen=True)
class EndSession:
    session_id: Optional[str]
    at: float


@dataclass(frozen=True)
class OpenRequest:
    station_id: str
    direction: str  # "entry" | "exit"


Action = Union[StartSession, UpdateSession, MissingData, EndSession, OpenRequest]


@dataclass(frozen=True)
class AgentState:
    user_id: str
    config: ProximityConfig = ProximityConfig()
    phase: str = IDLE
    session_id: Optional[str] = None
    station_id: Optional[str] = None
    kind: Optional[ServiceKind] = None
    last_in_range_at: Optional[float] = None
    last_report_at: Optional[float] = None
    missed_windows: int = 0
    pending: Optional[RssiSample] = None
    gate_direction: Optional[str] = None
    # station just left through a gate; ignored until unheard for loss_timeout
    suppressed: Optional[str] = None
    suppressed_seen_at: Optional[float] = None


def _idle(state: AgentState, **kw) -> AgentState:
    return replace(state, phase=IDLE, session_id=None, station_id=None, kind=None,
                   last_in_range_at=None, last_report_at=None, missed_windows=0,
                   pending=None, gate_direction=None, **kw)


def observe(state: AgentState, sample: RssiSample):
    """Feed one scan result. Returns ``(new_state, action or None)``."""
    cfg = state.config
    if classify(sample, cfg) == OUT_OF_RANGE:
        # a single weak reading does not lift gate suppression; only silence does (see tick)
        return state, None

    if state.suppressed == sample.station_id:
        return replace(state, suppressed_seen_at=sample.at), None

    if state.phase == IDLE:
        new = replace(state, phase=IN_SESSION, station_id=sample.station_id,
                      kind=sample.advertisement.mode, session_id=None,
                      last_in_range_at=sample.at, last_report_at=sample.at,
                      missed_windows=0, pending=None)
        return new, StartSession(sample.station_id, sample, cfg.sample_period)

    if state.phase != IN_SESSION or state.station_id != sample.station_id:
        return state, None
    if state.kind is ServiceKind.TURNSTILE:
        return state, None

    if state.session_id is not None and sample.at - state.last_report_at >= cfg.sample_period:
        new = replace(state, last_in_range_at=sample.at, last_report_at=sample.at,
                      missed_windows=0, pending=None)
        return new, UpdateSession(state.session_id, sample)
    return replace(state, last_in_range_at=sample.at, pending=sample), None


def tick(state: AgentState, now: float):
    """Advance the clock. Returns ``(new_state, action or None)``."""
    cfg = state.config
    if state.phase == IDLE:
        if state.suppressed is not None and now - (state.suppressed_seen_at or now) >= cfg.loss_timeout:
            return replace(state, suppressed=None, suppressed_seen_at=None), None
        return state, None
    if state.phase != IN_SESSION or state.session_id is None:
        return state, None
    if state.kind is ServiceKind.TURNSTILE:
        # no exit gate was ever reached (e.g. the rider only walked past the entry)
        if now - state.last_in_range_at >= cfg.gate_timeout:
            return _idle(state), EndSession(state.session_id, now)
        return state, None

    if now - state.last_in_range_at >= cfg.loss_timeout:
        return _idle(state), EndSession(state.session_id, now)
    if now - state.last_report_at >= cfg.sample_period:
        if state.pending is not None:
            new = replace(state, last_report_at=now, missed_windows=0, pending=None)
            return new, UpdateSession(state.session_id, state.pending)
        missed = state.missed_windows + 1
        new = replace(state, last_report_at=now, missed_windows=missed)
        return new, MissingData(state.session_id, missed, now)
    return state, None


def next_due(state: AgentState) -> Optional[float]:
    """Earliest time at which ``tick`` may act on its own (None when idle and unsuppressed)."""
    cfg = state.config
    if state.phase == IDLE:
        if state.suppressed is None:
            return None
        return (state.suppressed_seen_at or 0.0) + cfg.loss_timeout
    if state.phase == IN_SESSION and state.kind is ServiceKind.TURNSTILE and state.session_id is not None:
        return state.last_in_range_at + cfg.gate_timeout
    if state.phase == IN_SESSION and state.session_id is not None:
        return min(state.last_report_at + cfg.sample_period, state.last_in_range_at + cfg.loss_timeout)
    return None


def turnstile_flow(state: AgentState, sample: Union[RssiSample, Advertisement], now: float):
    """Gate handling. Returns ``(new_state, [actions])`` in protocol order."""
    if isinstance(sample, Advertisement):
        sample = RssiSample(sample.station_id, sample.tx_power_dbm, now, sample)
    sid = sample.station_id
    if state.suppressed == sid:
        return replace(state, suppressed_seen_at=now), []
    if state.phase == IDLE:
        new = replace(state, phase=AWAITING_TURNSTILE, gate_direction="entry", station_id=sid,
                      kind=ServiceKind.TURNSTILE, session_id=None, last_in_range_at=now,
                      last_report_at=now, missed_windows=0, pending=None)
        return new, [StartSession(sid, sample, state.config.sample_period),
                     OpenRequest(sid, "entry")]
    if (state.phase == IN_SESSION and state.kind is ServiceKind.TURNSTILE
            and state.session_id is not None and state.station_id != sid):
        new = replace(state, phase=AWAITING_TURNSTILE, gate_direction="exit", station_id=sid,
                      last_in_range_at=now, last_report_at=now)
        return new, [UpdateSession(state.session_id, sample),
                     EndSession(state.session_id, now),
                     OpenRequest(sid, "exit")]
    return state, []


def handle_sample(state: AgentState, sample: RssiSample):
    """Route one scan result to the on-board or gate logic."""
    if (sample.advertisement.mode is ServiceKind.TURNSTILE
            and classify(sample, state.config) == IN_RANGE):
        return turnstile_flow(state, sample, sample.at)
    new, action = observe(state, sample)
    return new, ([action] if action is not None else [])


def on_session_started(state: AgentState, session_id: str, kind: ServiceKind) -> AgentState:
    if state.phase == IN_SESSION or (state.phase == AWAITING_TURNSTILE and state.gate_direction == "entry"):
        return replace(state, session_id=session_id, kind=ServiceKind(kind))
    return state


def on_start_failed(state: AgentState) -> AgentState:
    return _idle(state)


def on_gate(state: AgentState, command: GateCommand, now: float) -> AgentState:
    if state.phase != AWAITING_TURNSTILE:
        return state
    station = state.station_id
    if state.gate_direction == "entry" and command.decision == "open" and state.session_id is not None:
        return replace(state, phase=IN_SESSION, gate_direction=None)
    # exit through the gate, or a refused entry: keep away from this gate until we leave it
    return _idle(state, suppressed=station, suppressed_seen_at=now)


# driver ---------------------------------------------------------------------

Transport = Callable[[ApiRequest], Optional[ApiResponse]]


def _sample_body(sample: RssiSample) -> dict:
    adv = sample.advertisement
    return {"rssi_dbm": sample.rssi_dbm, "location": adv.location.to_json(),
            "seq": adv.seq, "stale": adv.stale, "at": sample.at}


def action_request(action: Action, token: str) -> Optional[ApiRequest]:
    """Gateway request carrying a protocol action (None for gate requests)."""
    if isinstance(action, StartSession):
        body = {"station_id": action.station_id, "sample_period": action.sample_period}
        body.update(_sample_body(action.sample))
        return ApiRequest("POST", "/v1/sessions", token, body)
    if isinstance(action, UpdateSession):
        body = {"present": True}
        body.update(_sample_body(action.sample))
        return ApiRequest("PATCH", f"/v1/sessions/{action.session_id}", token, body)
    if isinstance(action, MissingData):
        return ApiRequest("PATCH", f"/v1/sessions/{action.session_id}", token,
                          {"present": False, "missed_windows": action.missed_windows, "at": action.at})
    if isinstance(action, EndSession):
        return ApiRequest("POST", f"/v1/sessions/{action.session_id}/end", token, {"at": action.at})
    return None


@dataclass
class RiderApp:
    """Runs one AgentState against a transport and a set of gate stations."""

    state: AgentState
    token: str
    transport: Transport
    gates: dict = field(default_factory=dict)  # station_id -> Station (turnstile)
    sent: dict = field(default_factory=dict)
    on_event: Optional[Callable[[str, dict], None]] = None

    def _emit(self, kind: str, **info) -> None:
        if self.on_event:
            self.on_event(kind, info)

    def _send(self, req: ApiRequest) -> Optional[ApiResponse]:
        return self.transport(req)

    def execute(self, actions, now: float) -> None:
        for action in actions:
            name = type(action).__name__
            self.sent[name] = self.sent.get(name, 0) + 1
            if isinstance(action, OpenRequest):
                gate = self.gates[action.station_id]
                cmd = gate.on_open_request(self.token, action.direction, now)
                before = self.state
                self.state = on_gate(before, cmd, now)
                self._emit("gate", station_id=action.station_id, direction=action.direction,
                           decision=cmd.decision, at=now)
                if before.gate_direction == "entry" and cmd.decision != "open" and before.session_id:
                    # the ride cannot begin; close the session so it is not left dangling
                    self.execute([EndSession(before.session_id, now)], now)
                continue
            if isinstance(action, (UpdateSession, EndSession)) and action.session_id is None:
                continue
            resp = self._send(action_request(action, self.token))
            if isinstance(action, StartSession):
                if resp is not None and resp.ok:
                    self.state = on_session_started(self.state, resp.body["session_id"],
                                                    resp.body["service_kind"])
                    self._emit("started", session_id=resp.body["session_id"],
                               station_id=action.station_id, at=now)
                else:
                    self.state = on_start_failed(self.state)
                    return  # nothing else in this batch makes sense without a session
            elif isinstance(action, EndSession):
                self._emit("ended", session_id=action.session_id, at=now,
                           delivered=resp is not None)

    def feed(self, samples, now: float) -> None:
        """Process one scan round (strongest first) and then the clock."""
        for sample in samples:
            self.state, actions = handle_sample(self.state, sample)
            if actions:
                self.execute(actions, now)
        self.state, action = tick(self.state, now)
        if action is not None:
            self.execute([action], now)

"""On-board and turnstile station emulation.

A station periodically advertises its identifier and last GPS fix. Turnstile
stations additionally forward open requests to the server and fail closed
when the server cannot be reached.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

from .domain import GeoPoint, ServiceKind
from .errors import InvalidInputError, ModeError, SchedulingError

DEFAULT_STALENESS_WINDOW = 60.0


@dataclass
class StationState:
    station_id: str
    mode: ServiceKind
    last_fix: GeoPoint
    last_fix_at: float
    advertising_interval: float = 1.0
    tx_power_dbm: float = -59.0
    seq: int = 0
    last_emitted_at: Optional[float] = None
    staleness_window: float = DEFAULT_STALENESS_WINDOW

    def __post_init__(self):
        self.mode = ServiceKind(self.mode)
        if self.advertising_interval <= 0:
            raise InvalidInputError("advertising interval must be positive")


@dataclass(frozen=True)
class Advertisement:
    station_id: str
    location: GeoPoint
    seq: int
    emitted_at: float
    tx_power_dbm: float
    stale: bool
    mode: ServiceKind = ServiceKind.ON_BOARD


@dataclass(frozen=True)
class GateCommand:
    decision: str  # "open" | "keep_closed"
    reason: str


def next_advertisement(state: StationState, now: float) -> Advertisement:
    if state.last_emitted_at is not None and now < state.last_emitted_at + state.advertising_interval:
        raise SchedulingError(
            f"{state.station_id}: next advertisement due at "
            f"{state.last_emitted_at + state.advertising_interval}, asked at {now}"
        )
    state.seq += 1
    state.last_emitted_at = now
    return Advertisement(
        station_id=state.station_id,
        location=state.last_fix,
        seq=state.seq,
        emitted_at=now,
        tx_power_dbm=state.tx_power_dbm,
        stale=(now - state.last_fix_at) > state.staleness_window,
        mode=state.mode,
    )


def update_location(state: StationState, fix: GeoPoint | tuple, at: float) -> StationState:
    if not isinstance(fix, GeoPoint):
        fix = GeoPoint(*fix)  # raises before any mutation
    if at < state.last_fix_at:
        return state
    state.last_fix = fix
    state.last_fix_at = at
    return state


def handle_open_request(state: StationState, authorization: str) -> GateCommand:
    if state.mode is not ServiceKind.TURNSTILE:
        raise ModeError(f"{state.station_id} is an on-board station and has no gate")
    if authorization == "granted":
        return GateCommand("open", "granted")
    if authorization == "denied":
        return GateCommand("keep_closed", "denied")
    if authorization == "unreachable":
        return GateCommand("keep_closed", "fail-closed")
    raise InvalidInputError(f"unknown authorization outcome {authorization!r}")


@dataclass
class Station:
    """Single-threaded event loop around a StationState.

    ``authorize`` sends the open request to the server and returns
    ``"granted"``, ``"denied"`` or ``"unreachable"``.
    """

    state: StationState
    authorize: Optional[Callable[[str, str], str]] = None
    gate_log: list = field(default_factory=list)

    @property
    def station_id(self) -> str:
        return self.state.station_id

    def due(self, now: float) -> bool:
        s = self.state
        return s.last_emitted_at is None or now >= s.last_emitted_at + s.advertising_interval

    def on_tick(self, now: float) -> Optional[Advertisement]:
        if not self.due(now):
            return None
        return next_advertisement(self.state, now)

    def on_gps_fix(self, fix: GeoPoint, at: float) -> None:
        update_location(self.state, fix, at)

    def on_open_request(self, token: str, direction: str, now: float) -> GateCommand:
        if self.state.mode is not ServiceKind.TURNSTILE:
            raise ModeError(f"{self.station_id} is an on-board station and has no gate")
        outcome = self.authorize(token, direction) if self.authorize else "unreachable"
        cmd = handle_open_request(self.state, outcome)
        self.gate_log.append((now, direction, outcome, cmd.decision))
        return cmd


def load_station_config(path_or_dict) -> StationState:
    """Station configuration: station_id, mode, interval, tx_power, initial fix."""
    if isinstance(path_or_dict, dict):
        cfg = path_or_dict
    else:
        with open(path_or_dict) as fh:
            cfg = json.load(fh)
    fix = cfg.get("initial_fix") or cfg.get("fix")
    return StationState(
        station_id=str(cfg["station_id"]),
        mode=ServiceKind(cfg.get("mode", "on_board")),
        last_fix=GeoPoint.from_json(fix),
        last_fix_at=float(cfg.get("fix_at", 0.0)),
        advertising_interval=float(cfg.get("interval", 1.0)),
        tx_power_dbm=float(cfg.get("tx_power", -59.0)),
        staleness_window=float(cfg.get("staleness_window", DEFAULT_STALENESS_WINDOW)),
    )

"""Per-service session handling: ongoing store, skimming, fares, archival.

One :class:`TransitCore` exists per transport service, and each owns its own
completed-session archive so records of different services never mix.
Ongoing sessions live only in memory.
"""
from __future__ import annotations

import logging
import math
import secrets
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .domain import (
    BeaconLogEntry,
    FarePlan,
    GeoPoint,
    Money,
    ServiceKind,
    SessionPayment,
    SessionState,
    TransportService,
    User,
    UserSession,
    haversine_distance,
)
from .errors import ConflictError, InvalidInputError, NotFoundError
from .privacy import CompletedSessionStore, generalize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SkimmingConfig:
    min_coverage: float = 0.6
    max_gap_windows: int = 6
    min_duration: float = 60.0

    def __post_init__(self):
        if not (0.0 <= self.min_coverage <= 1.0) or self.max_gap_windows < 0 or self.min_duration < 0:
            raise InvalidInputError("invalid skimming configuration")


@dataclass(frozen=True)
class SkimResult:
    validated: bool
    coverage: float
    reason: Optional[str] = None
    present_windows: int = 0
    total_windows: int = 0
    longest_gap: int = 0


def total_windows(session: UserSession) -> int:
    """Sampling windows spanned by the session, whether or not they were reported."""
    n = math.ceil(session.duration / session.sample_period - 1e-9) if session.duration > 0 else 0
    last = max((e.window_index for e in session.beacon_log), default=-1)
    return max(n, last + 1, 1)


def skim_validate(session: UserSession, config: SkimmingConfig = SkimmingConfig()) -> SkimResult:
    """Decide whether the recorded signal trace supports a real ride.

    On-board sessions need enough present windows (coverage), no long
    silent stretch, and a minimum duration. Gate sessions carry only an
    entry and an exit reading, so they need both plus the duration.
    """
    if session.state is not SessionState.ENDED:
        raise ConflictError(f"session {session.session_id} is {session.state.value}, not ended")
    present = np.array([e.window_index for e in session.beacon_log if e.present], dtype=np.int64)
    n_total = total_windows(session)
    if session.kind is ServiceKind.TURNSTILE:
        n_present = len(present)
        coverage = 1.0 if n_present >= 2 else n_present / 2.0
        if n_present == 0:
            return SkimResult(False, 0.0, "no-signal", 0, n_total, n_total)
        if n_present < 2 or not session.beacon_log[-1].present:
            return SkimResult(False, coverage, "no-exit", n_present, n_total, 0)
        if session.duration < config.min_duration:
            return SkimResult(False, coverage, "duration", n_present, n_total, 0)
        return SkimResult(True, coverage, None, n_present, n_total, 0)

    n_present, longest_gap = kernels.window_stats(present, n_total)
    coverage = n_present / n_total
    if n_present == 0:
        return SkimResult(False, 0.0, "no-signal", 0, n_total, longest_gap)
    if coverage < config.min_coverage:
        return SkimResult(False, coverage, "coverage", n_present, n_total, longest_gap)
    if longest_gap > config.max_gap_windows:
        return SkimResult(False, coverage, "gap", n_present, n_total, longest_gap)
    if session.duration < config.min_duration:
        return SkimResult(False, coverage, "duration", n_present, n_total, longest_gap)
    return SkimResult(True, coverage, None, n_present, n_total, longest_gap)


def fare_cents(plan: FarePlan, km: float) -> int:
    if plan.kind == "flat":
        return plan.price.amount
    raw = plan.base.amount + plan.per_km.amount * km
    raw = min(max(raw, plan.minimum.amount), plan.maximum.amount)
    return Money.from_real(raw).amount


def session_fare(plan: FarePlan, session: UserSession) -> SessionPayment:
    if session.state is not SessionState.VALIDATED:
        raise ConflictError(f"invalid-state: cannot price a {session.state.value} session")
    km = haversine_distance(session.start_pos, session.end_pos or session.start_pos)
    return SessionPayment(session.session_id, Money(fare_cents(plan, km)), plan,
                          service_id=session.service_id, end_ts=session.end_ts)


@dataclass
class _Ongoing:
    session_id: str
    user_id: str
    station_id: str
    start_pos: GeoPoint
    start_ts: float
    sample_period: float
    kind: ServiceKind
    log: list = field(default_factory=list)
    last_activity: float = 0.0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


class OngoingSessionStore:
    """RAM-only map of ongoing sessions with per-session locking."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_id: dict = {}
        self._by_user: dict = {}
        self._closed: set = set()

    def add(self, rec: _Ongoing) -> None:
        with self._lock:
            self._by_id[rec.session_id] = rec
            self._by_user[rec.user_id] = rec.session_id

    def get(self, session_id: str) -> _Ongoing:
        with self._lock:
            rec = self._by_id.get(session_id)
            if rec is None:
                if session_id in self._closed:
                    raise ConflictError(f"session {session_id} is no longer ongoing")
                raise NotFoundError(f"unknown session {session_id}")
            return rec

    def for_user(self, user_id: str) -> Optional[str]:
        with self._lock:
            return self._by_user.get(user_id)

    def pop(self, session_id: str) -> _Ongoing:
        with self._lock:
            rec = self._by_id.pop(session_id, None)
            if rec is None:
                if session_id in self._closed:
                    raise ConflictError(f"session {session_id} already ended")
                raise NotFoundError(f"unknown session {session_id}")
            if self._by_user.get(rec.user_id) == session_id:
                del self._by_user[rec.user_id]
            self._closed.add(session_id)
            return rec

    def __contains__(self, session_id) -> bool:
        with self._lock:
            return session_id in self._by_id

    def __len__(self) -> int:
        with self._lock:
            return len(self._by_id)

    def snapshot(self) -> list:
        with self._lock:
            return list(self._by_id.values())


@dataclass(frozen=True)
class FinalizeOutcome:
    session: UserSession
    skim: SkimResult
    payment: Optional[SessionPayment] = None
    record_key: Optional[str] = None


class TransitCore:
    def __init__(
        self,
        service: TransportService,
        completed: CompletedSessionStore,
        skimming: SkimmingConfig = SkimmingConfig(),
        new_id: Optional[Callable[[str], str]] = None,
        orphan_timeout: float = 150.0,
        gate_orphan_timeout: float = 4 * 3600.0,
    ):
        self.service = service
        self.completed = completed
        self.skimming = skimming
        self.ongoing = OngoingSessionStore()
        self.orphan_timeout = orphan_timeout
        self.gate_orphan_timeout = gate_orphan_timeout
        self._new_id = new_id or (lambda prefix: prefix + secrets.token_hex(8))
        self.rejected_count = 0
        self.archived_count = 0
        self._superseded: list = []

    @property
    def service_id(self) -> str:
        return self.service.service_id

    def start_session(self, user_id: str, station_id: str, location: GeoPoint, rssi_dbm: Optional[float],
                      now: float, sample_period: float = 5.0):
        """Open a session, or return the rider's ongoing one at the same station.

        An ongoing session at another station of this service is ended at its
        last activity and handed over through :meth:`take_superseded`.
        Returns ``(session_id, created)``.
        """
        if sample_period <= 0:
            raise InvalidInputError("sample period must be positive")
        existing = self.ongoing.for_user(user_id)
        if existing is not None:
            rec = self.ongoing.get(existing)
            if rec.station_id == station_id:
                return existing, False
            # the rider moved on and the old end never arrived: close it where it went quiet
            with rec.lock:
                popped = self.ongoing.pop(existing)
                self._superseded.append(self._ended(popped, popped.last_activity))
        rec = _Ongoing(
            session_id=self._new_id("s-"),
            user_id=user_id,
            station_id=station_id,
            start_pos=location,
            start_ts=now,
            sample_period=float(sample_period),
            kind=self.service.kind,
            last_activity=now,
        )
        rec.log.append(BeaconLogEntry(0, True, now, rssi_dbm, location))
        self.ongoing.add(rec)
        return rec.session_id, True

    def take_superseded(self) -> list:
        out, self._superseded = self._superseded, []
        return out

    def owner_of(self, session_id: str) -> str:
        return self.ongoing.get(session_id).user_id

    def update_session(self, session_id: str, now: float, present: bool, rssi_dbm: Optional[float] = None,
                       location: Optional[GeoPoint] = None, missed_windows: int = 0) -> BeaconLogEntry:
        rec = self.ongoing.get(session_id)
        with rec.lock:
            if session_id not in self.ongoing:
                raise ConflictError(f"session {session_id} is no longer ongoing")
            idx = int(math.floor((now - rec.start_ts) / rec.sample_period + 1e-9))
            if rec.log and idx <= rec.log[-1].window_index:
                raise ConflictError(f"window {idx} already reported for {session_id}")
            if present and location is None:
                raise InvalidInputError("a present reading needs a location")
            entry = BeaconLogEntry(idx, bool(present), now, rssi_dbm if present else None,
                                   location if present else None, int(missed_windows))
            rec.log.append(entry)
            rec.last_activity = now
            return entry

    def _ended(self, rec: _Ongoing, end_ts: float) -> UserSession:
        end_pos = next((e.location for e in reversed(rec.log) if e.present and e.location), rec.start_pos)
        return UserSession(
            session_id=rec.session_id,
            user_id=rec.user_id,
            service_id=self.service_id,
            state=SessionState.ENDED,
            start_pos=rec.start_pos,
            start_ts=rec.start_ts,
            end_pos=end_pos,
            end_ts=max(end_ts, rec.start_ts),
            beacon_log=tuple(rec.log),
            station_id=rec.station_id,
            kind=rec.kind,
            sample_period=rec.sample_period,
        )

    def end_session(self, session_id: str, now: float) -> UserSession:
        rec = self.ongoing.get(session_id)
        with rec.lock:
            rec = self.ongoing.pop(session_id)
            return self._ended(rec, now)

    def abort_session(self, session_id: str) -> None:
        """Drop a session that never really began (refused at the gate)."""
        rec = self.ongoing.get(session_id)
        with rec.lock:
            self.ongoing.pop(session_id)

    def expire_orphans(self, now: float) -> list:
        """Force-end sessions whose rider went silent; they end at their last activity."""
        out = []
        for rec in self.ongoing.snapshot():
            limit = self.gate_orphan_timeout if rec.kind is ServiceKind.TURNSTILE else self.orphan_timeout
            if now - rec.last_activity >= limit:
                with rec.lock:
                    try:
                        popped = self.ongoing.pop(rec.session_id)
                    except (ConflictError, NotFoundError):
                        continue
                    out.append(self._ended(popped, popped.last_activity))
        return out

    def archive_completed(self, session: UserSession, user: User, now: float) -> Optional[str]:
        if session.state is SessionState.REJECTED:
            self.rejected_count += 1
            return None
        if session.state is not SessionState.VALIDATED:
            raise ConflictError(f"invalid-state: cannot archive a {session.state.value} session")
        key = self.completed.archive(generalize(user, session, now))
        self.archived_count += 1
        return key

    def finalize(self, session: UserSession, user: User, now: float) -> FinalizeOutcome:
        """Skim, price and archive an ended session. Runs off the request path."""
        skim = skim_validate(session, self.skimming)
        if not skim.validated:
            rejected = session.transition(SessionState.REJECTED)
            self.archive_completed(rejected, user, now)
            log.debug("session %s rejected: %s", session.session_id, skim.reason)
            return FinalizeOutcome(rejected, skim)
        validated = session.transition(SessionState.VALIDATED)
        payment = session_fare(self.service.fare_plan, validated)
        key = self.archive_completed(validated, user, now)
        return FinalizeOutcome(validated, skim, payment, key)

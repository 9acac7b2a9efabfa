"""Server gateway: the single externally reachable surface.

``Gateway.route_request`` dispatches REST-shaped requests to the shared
services and the per-service transit cores. Background work (skimming,
pricing, archival, route closing, orphan and retention sweeps) happens in
``run_background``, never inside a request.
"""
from __future__ import annotations

import itertools
import logging
import os
import re
import secrets
from collections import Counter, deque
from dataclasses import dataclass, field
from datetime import date
from typing import Callable, Iterable, Optional

from .api import ApiRequest, ApiResponse
from .domain import GeoPoint, Money, ServiceKind, SessionState, TransportService, parse_ts, to_rfc3339
from .errors import (
    AuthorizationDenied,
    ConflictError,
    InvalidInputError,
    KAnonymityRefused,
    NotFoundError,
    QuickinError,
)
from .privacy import CompletedSessionStore, EncryptedStore, KeyService
from .quickin_core import (
    DAY,
    DiscountPolicy,
    QuickinCore,
    RetentionConfig,
    RouteAssemblyConfig,
    wallet_debits,
)
from .stats import export_stats_csv, service_stats
from .store import KVStore
from .transit import SkimmingConfig, TransitCore

log = logging.getLogger(__name__)

_PARAM = re.compile(r"\(\?P<(\w+)>[^)]*\)")


class VirtualClock:
    def __init__(self, now: float = 0.0):
        self.now = float(now)

    def advance(self, dt: float) -> float:
        self.now += dt
        return self.now

    def set(self, t: float) -> None:
        self.now = float(t)


class SequentialIds:
    """Deterministic id source for reproducible runs."""

    def __init__(self):
        self._counters: dict = {}

    def __call__(self, prefix: str) -> str:
        c = self._counters.setdefault(prefix, itertools.count(1))
        return f"{prefix}{next(c):06d}"


@dataclass(frozen=True)
class Principal:
    kind: str  # "user" | "dashboard"
    ident: str


def _random_id(prefix: str) -> str:
    return prefix + secrets.token_hex(8)


class Gateway:
    def __init__(self, quickin: QuickinCore, transits: dict, clock: Optional[VirtualClock] = None,
                 k_threshold: int = 5, new_id: Optional[Callable[[str], str]] = None):
        self.quickin = quickin
        self.transits = transits
        self.clock = clock or VirtualClock()
        self.k_threshold = k_threshold
        self._new_id = new_id or _random_id
        self._tokens: dict = {}
        self._session_service: dict = {}
        self._queue: deque = deque()
        self.listeners: list = []
        self.counters: Counter = Counter()
        self.messages: Counter = Counter()
        self._last_retention: Optional[float] = None
        self._routes = [
            ("POST", r"/v1/users", None, self._register),
            ("POST", r"/v1/sessions", "user", self._start),
            ("PATCH", r"/v1/sessions/(?P<sid>[^/]+)", "user", self._update),
            ("POST", r"/v1/sessions/(?P<sid>[^/]+)/end", "user", self._end),
            ("POST", r"/v1/turnstile/authorize", "user", self._turnstile),
            ("GET", r"/v1/wallet", "user", self._wallet),
            ("GET", r"/v1/routes", "user", self._routes_view),
            ("GET", r"/v1/stats/(?P<service>[^/]+)", "dashboard", self._stats),
            ("GET", r"/v1/settlement/(?P<customer>[^/]+)", "dashboard", self._settlement),
        ]
        self._compiled = [(m, re.compile(p + r"\Z"), a, h, m + " " + _PARAM.sub(r"{\1}", p))
                          for m, p, a, h in self._routes]

    # plumbing ---------------------------------------------------------------
    def issue_dashboard_token(self, customer_id: str) -> str:
        if customer_id not in self.quickin.customers:
            raise NotFoundError(f"unknown customer {customer_id}")
        token = self._new_id("dt-")
        self._tokens[token] = Principal("dashboard", customer_id)
        return token

    def _notify(self, event: str, payload: dict) -> None:
        for fn in self.listeners:
            fn(event, payload)

    def route_request(self, req: ApiRequest) -> ApiResponse:
        path = req.path.split("?", 1)[0]
        matched_path = False
        for method, pattern, auth, handler, label in self._compiled:
            m = pattern.match(path)
            if not m:
                continue
            matched_path = True
            if method != req.method:
                continue
            self.messages[label] += 1
            principal = None
            if auth is not None:
                principal = self._tokens.get(req.token or "")
                if principal is None:
                    return ApiResponse(401, {"error": "missing or invalid token"})
                if principal.kind != auth:
                    return ApiResponse(403, {"error": f"{auth} token required"})
            try:
                return handler(req, principal, **m.groupdict())
            except NotFoundError as exc:
                return ApiResponse(404, {"error": str(exc)})
            except AuthorizationDenied as exc:
                return ApiResponse(403, {"error": "authorization-denied", "reason": exc.reason})
            except KAnonymityRefused as exc:
                return ApiResponse(409, {"error": "k-anonymity", "k_min": exc.report.k_min,
                                         "threshold": exc.threshold})
            except ConflictError as exc:
                return ApiResponse(409, {"error": str(exc)})
            except (InvalidInputError, KeyError, TypeError, ValueError) as exc:
                return ApiResponse(400, {"error": f"bad request: {exc}"})
        if matched_path:
            return ApiResponse(405, {"error": "method not allowed"})
        return ApiResponse(404, {"error": f"no route for {req.method} {path}"})

    def _transit_for_session(self, sid: str) -> TransitCore:
        service_id = self._session_service.get(sid)
        if service_id is None:
            raise NotFoundError(f"unknown session {sid}")
        return self.transits[service_id]

    def _own_session(self, sid: str, principal: Principal) -> TransitCore:
        transit = self._transit_for_session(sid)
        if transit.owner_of(sid) != principal.ident:
            raise AuthorizationDenied("not-owner")
        return transit

    # handlers ---------------------------------------------------------------
    def _register(self, req, principal):
        b = req.body
        user, wallet = self.quickin.register_user(
            b.get("gender", "unspecified"), date.fromisoformat(b["birth_date"]),
            b["payment_method_ref"], self.clock.now, identity_key=b.get("identity_key"))
        token = self._new_id("t-")
        self._tokens[token] = Principal("user", user.user_id)
        return ApiResponse(201, {"user_id": user.user_id, "token": token, "wallet_id": wallet.wallet_id})

    def _start(self, req, principal):
        b = req.body
        _, service_id = self.quickin.resolve_station(b["station_id"])
        auth = self.quickin.authorize(principal.ident)
        if not auth.granted:
            raise AuthorizationDenied(auth.reason)
        transit = self.transits[service_id]
        sid, created = transit.start_session(
            principal.ident, b["station_id"], GeoPoint.from_json(b["location"]),
            b.get("rssi_dbm"), self.clock.now, float(b.get("sample_period", 5.0)))
        if created:
            self._session_service[sid] = service_id
            self.counters["sessions_started"] += 1
        return ApiResponse(201 if created else 200, {
            "session_id": sid, "service_id": service_id, "service_kind": transit.service.kind.value})

    def _update(self, req, principal, sid):
        transit = self._own_session(sid, principal)
        b = req.body
        present = bool(b.get("present", True))
        entry = transit.update_session(
            sid, self.clock.now, present, rssi_dbm=b.get("rssi_dbm"),
            location=GeoPoint.from_json(b["location"]) if present else None,
            missed_windows=int(b.get("missed_windows", 0)))
        return ApiResponse(200, {"session_id": sid, "window_index": entry.window_index})

    def _end(self, req, principal, sid):
        transit = self._own_session(sid, principal)
        session = transit.end_session(sid, self.clock.now)
        self._queue.append(session)
        return ApiResponse(200, {"session_id": sid, "state": session.state.value})

    def _turnstile(self, req, principal):
        b = req.body
        direction = b.get("direction")
        if direction not in ("entry", "exit"):
            raise InvalidInputError("direction must be entry or exit")
        _, service_id = self.quickin.resolve_station(b["station_id"])
        transit = self.transits[service_id]
        if transit.service.kind is not ServiceKind.TURNSTILE:
            raise ConflictError(f"station {b['station_id']} has no gate")
        user_id = principal.ident
        if direction == "exit":
            # a known rider is always let out
            return ApiResponse(200, {"decision": "granted", "reason": "exit"})
        auth = self.quickin.authorize(user_id)
        sid = transit.ongoing.for_user(user_id)
        if auth.granted and sid is None:
            auth_reason = "no-session"
        elif not auth.granted:
            auth_reason = auth.reason
        else:
            return ApiResponse(200, {"decision": "granted", "reason": "ok", "session_id": sid})
        if sid is not None:
            transit.abort_session(sid)
            self.counters["sessions_aborted"] += 1
        return ApiResponse(200, {"decision": "denied", "reason": auth_reason})

    def _wallet(self, req, principal):
        w = self.quickin.wallet(principal.ident)
        return ApiResponse(200, {
            "wallet_id": w.wallet_id, "balance": w.balance.amount, "floor": w.floor.amount,
            "currency": w.floor.currency, "blocked": w.blocked,
            "ledger": [{"at": at, "delta": d.amount, "reference": ref} for at, d, ref in w.ledger],
        })

    def _routes_view(self, req, principal):
        owner = req.query.get("user_id") or req.body.get("user_id") or principal.ident
        if owner != principal.ident:
            raise AuthorizationDenied("not-owner")
        return ApiResponse(200, {"routes": self.quickin.routes_for(owner)})

    def _dashboard_service(self, principal, service_id):
        transit = self.transits.get(service_id)
        if transit is None:
            raise NotFoundError(f"unknown service {service_id}")
        if transit.service.customer_id != principal.ident:
            raise AuthorizationDenied("not-owner")
        return transit

    @staticmethod
    def _period(req) -> Optional[tuple]:
        q = req.query
        if "from" not in q and "to" not in q:
            return None
        return (parse_ts(q.get("from", float("-inf"))), parse_ts(q.get("to", float("inf"))))

    def _stats(self, req, principal, service):
        transit = self._dashboard_service(principal, service)
        records = transit.completed.records()
        period = self._period(req)
        if req.query.get("format") == "csv":
            return ApiResponse(200, export_stats_csv(records, period, self.k_threshold))
        return ApiResponse(200, service_stats(records, period))

    def _settlement(self, req, principal, customer):
        if customer != principal.ident:
            raise AuthorizationDenied("not-owner")
        period = self._period(req) or (float("-inf"), float("inf"))
        rep = self.quickin.settle_customer(customer, period)
        return ApiResponse(200, {"customer_id": rep.customer_id, "total": rep.total.amount,
                                 "session_count": rep.session_count,
                                 "period": [_ts_or_none(p) for p in rep.period]})

    # operator-side surfaces -------------------------------------------------
    def export_stats(self, service_id: str, period: Optional[tuple] = None) -> str:
        transit = self.transits.get(service_id)
        if transit is None:
            raise NotFoundError(f"unknown service {service_id}")
        return export_stats_csv(transit.completed.records(), period, self.k_threshold)

    # background -------------------------------------------------------------
    def run_background(self, now: Optional[float] = None) -> None:
        now = self.clock.now if now is None else now
        for transit in self.transits.values():
            for session in transit.expire_orphans(now):
                self.counters["sessions_orphaned"] += 1
                self._queue.append(session)
            for session in transit.take_superseded():
                self.counters["sessions_superseded"] += 1
                self._queue.append(session)
        while self._queue:
            session = self._queue.popleft()
            transit = self.transits[session.service_id]
            user = self.quickin.user(session.user_id)
            outcome = transit.finalize(session, user, now)
            self._session_service.pop(session.session_id, None)
            if outcome.session.state is SessionState.VALIDATED:
                self.counters["sessions_validated"] += 1
                closed = self.quickin.record_session(outcome.session, outcome.payment, now)
                if closed is not None:
                    self._charged(closed)
            else:
                self.counters["sessions_rejected"] += 1
            self._notify("finalized", {"outcome": outcome})
        for rp in self.quickin.close_expired_routes(now):
            self._charged(rp)
        if self._last_retention is None or now - self._last_retention >= DAY:
            self._last_retention = now
            self.quickin.sweep_retention(now)

    def flush(self, now: Optional[float] = None) -> None:
        """Finish pending work and close every open route."""
        now = self.clock.now if now is None else now
        self.run_background(now)
        for rp in self.quickin.close_all_routes(now):
            self._charged(rp)

    def _charged(self, rp) -> None:
        self.counters["routes_closed"] += 1
        self.counters["total_charged"] += rp.amount.amount
        self._notify("charged", {"payment": rp})

    def total_wallet_debits(self) -> int:
        return sum(wallet_debits(w) for w in self.quickin.wallets.values())


def _ts_or_none(t: float):
    return None if t in (float("inf"), float("-inf")) else to_rfc3339(t)


# assembly -------------------------------------------------------------------

@dataclass
class StoreLayout:
    """Where each service keeps its data inside a store directory."""

    root: Optional[str] = None

    def path(self, *parts) -> Optional[str]:
        return None if self.root is None else os.path.join(self.root, *parts)

    def kv(self, *parts) -> KVStore:
        return KVStore(self.path(*parts))

    def keys(self) -> KeyService:
        if self.root is None:
            return KeyService()
        os.makedirs(self.root, exist_ok=True)
        return KeyService.open_or_create(self.path("master.key"))

    def completed(self, service_id: str, keys: KeyService) -> CompletedSessionStore:
        return CompletedSessionStore(self.kv("completed", f"{service_id}.sqlite"), keys)

    def completed_service_ids(self) -> list:
        d = self.path("completed")
        if d is None or not os.path.isdir(d):
            return []
        return sorted(f[: -len(".sqlite")] for f in os.listdir(d) if f.endswith(".sqlite"))


def build_system(
    services: Iterable[TransportService],
    stations: Iterable[tuple] = (),
    store_dir: Optional[str] = None,
    clock: Optional[VirtualClock] = None,
    new_id: Optional[Callable[[str], str]] = None,
    skimming: SkimmingConfig = SkimmingConfig(),
    assembly: RouteAssemblyConfig = RouteAssemblyConfig(),
    discounts: DiscountPolicy = DiscountPolicy(),
    retention: RetentionConfig = RetentionConfig(),
    wallet_floor: Money = Money(-500),
    k_threshold: int = 5,
    orphan_timeout: float = 150.0,
) -> Gateway:
    """Wire key service, stores, shared services and one transit core per service.

    ``stations`` holds ``(station_id, vehicle_id, service_id)`` triples.
    """
    layout = StoreLayout(store_dir)
    keys = layout.keys()
    new_id = new_id or _random_id
    quickin = QuickinCore(
        routes=EncryptedStore(layout.kv("routes.sqlite"), keys),
        wallets=EncryptedStore(layout.kv("users.sqlite"), keys),
        settlements=EncryptedStore(layout.kv("settlement.sqlite"), keys),
        assembly=assembly, discounts=discounts, retention=retention,
        wallet_floor=wallet_floor, new_id=new_id,
    )
    transits = {}
    for svc in services:
        quickin.add_service(svc)
        transits[svc.service_id] = TransitCore(svc, layout.completed(svc.service_id, keys), skimming,
                                               new_id=new_id, orphan_timeout=orphan_timeout)
    for station_id, vehicle_id, service_id in stations:
        quickin.assign_station(station_id, vehicle_id, service_id)
    gw = Gateway(quickin, transits, clock, k_threshold=k_threshold, new_id=new_id)
    gw.keys = keys
    return gw

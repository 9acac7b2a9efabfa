"""Services shared by all transport services: users, wallets, routes, payments.

Sessions validated by the per-service cores are chained into routes; a route
closes once no new session starts within the transfer window, and only then
is it priced (with transfer discounts and subscriptions) and charged.
"""
from __future__ import annotations

import hashlib
import json
import secrets
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from decimal import Decimal
from fractions import Fraction
from typing import Callable, Iterable, Optional

from .domain import (
    Gender,
    Money,
    RoutePayment,
    SessionPayment,
    TransportService,
    User,
    UserRoute,
    UserSession,
    VehicleAccessIdentifier,
    Wallet,
    round_half_up,
)
from .errors import ConflictError, InvalidInputError, NotFoundError
from .privacy import EncryptedStore

DAY = 86400.0
ROUTE_DEBIT_PREFIX = "route:"


@dataclass(frozen=True)
class RouteAssemblyConfig:
    transfer_window: float = 3600.0

    def __post_init__(self):
        if self.transfer_window <= 0:
            raise InvalidInputError("transfer window must be positive")


@dataclass(frozen=True)
class Subscription:
    user_id: str
    service_id: str
    valid_from: float
    valid_to: float

    def covers(self, user_id: str, service_id: str, at: float) -> bool:
        return (self.user_id == user_id and self.service_id == service_id
                and self.valid_from <= at < self.valid_to)


@dataclass(frozen=True)
class DiscountPolicy:
    transfer_discount: Fraction = Fraction(1, 2)
    subscriptions: frozenset = frozenset()

    def __post_init__(self):
        ratio = Fraction(str(self.transfer_discount)) if isinstance(self.transfer_discount, float) \
            else Fraction(self.transfer_discount)
        if not (0 <= ratio <= 1):
            raise InvalidInputError("transfer discount must lie in [0, 1]")
        object.__setattr__(self, "transfer_discount", ratio)
        object.__setattr__(self, "subscriptions", frozenset(self.subscriptions))

    def subscribed(self, user_id: str, service_id: str, at: float) -> bool:
        return any(s.covers(user_id, service_id, at) for s in self.subscriptions)


@dataclass(frozen=True)
class RetentionConfig:
    max_age_days: float = 30.0

    def __post_init__(self):
        if self.max_age_days <= 0:
            raise InvalidInputError("retention age must be positive")


@dataclass(frozen=True)
class SettlementReport:
    customer_id: str
    period: tuple
    total: Money
    session_count: int


@dataclass(frozen=True)
class Authorization:
    granted: bool
    reason: str = "ok"


# pure rules ----------------------------------------------------------------

def extends_route(previous_end_ts: Optional[float], new_start_ts: float, config: RouteAssemblyConfig) -> bool:
    return previous_end_ts is not None and new_start_ts - previous_end_ts <= config.transfer_window


def route_payment(route: UserRoute, session_payments: Iterable[SessionPayment],
                  policy: DiscountPolicy = DiscountPolicy()) -> RoutePayment:
    """Subscribed sessions cost nothing; of the rest, the first pays in full and
    every later one gets the transfer discount."""
    breakdown = []
    first_paid = False
    currency = "EUR"
    for sp in session_payments:
        gross = sp.amount
        currency = gross.currency
        if policy.subscribed(route.user_id, sp.service_id, sp.end_ts):
            discount = gross.amount
        elif not first_paid:
            discount = 0
            first_paid = True
        else:
            ratio = policy.transfer_discount
            discount = round_half_up(Decimal(gross.amount * ratio.numerator) / Decimal(ratio.denominator))
        breakdown.append((sp.session_id, gross, Money(discount, currency)))
    total = sum(g.amount - d.amount for _, g, d in breakdown)
    return RoutePayment(route.route_id, Money(total, currency), tuple(breakdown))


def charge_wallet(wallet: Wallet, payment: RoutePayment, at: float = 0.0) -> Wallet:
    """Post the route charge. Charging never fails; a wallet pushed under its
    floor is blocked for future rides instead."""
    wallet.post(at, -payment.amount, ROUTE_DEBIT_PREFIX + payment.route_id)
    if wallet.autocharge_below is not None:
        while wallet.balance < wallet.autocharge_below:
            wallet.post(at, wallet.autocharge_amount, "autocharge")
    wallet.blocked = wallet.balance < wallet.floor
    return wallet


def wallet_debits(wallet: Wallet) -> int:
    return -sum(d.amount for _, d, ref in wallet.ledger if ref.startswith(ROUTE_DEBIT_PREFIX))


def retention_sweep(route_store: EncryptedStore, now: float, config: RetentionConfig = RetentionConfig()) -> int:
    """Delete route records at least ``max_age_days`` old."""
    cutoff = now - config.max_age_days * DAY
    doomed = [k for k, rec in ((k, _json(raw)) for k, raw in route_store.items()) if rec["created_at"] <= cutoff]
    for k in doomed:
        route_store.delete(k)
    return len(doomed)


def _json(raw: bytes):
    return json.loads(raw)


# service -------------------------------------------------------------------

@dataclass
class _OpenRoute:
    route_id: str
    user_id: str
    created_at: float
    payments: list = field(default_factory=list)  # SessionPayment
    last_end_ts: float = 0.0


class QuickinCore:
    def __init__(
        self,
        routes: EncryptedStore,
        wallets: EncryptedStore,
        settlements: EncryptedStore,
        assembly: RouteAssemblyConfig = RouteAssemblyConfig(),
        discounts: DiscountPolicy = DiscountPolicy(),
        retention: RetentionConfig = RetentionConfig(),
        wallet_floor: Money = Money(-500),
        new_id: Optional[Callable[[str], str]] = None,
    ):
        self.route_store = routes
        self.wallet_store = wallets
        self.settlement_store = settlements
        self.assembly = assembly
        self.discounts = discounts
        self.retention = retention
        self.wallet_floor = wallet_floor
        self._new_id = new_id or (lambda prefix: prefix + secrets.token_hex(8))
        self.users: dict = {}
        self.wallets: dict = {}
        self._identities: dict = {}
        self.services: dict = {}
        self.customers: set = set()
        self._registry: dict = {}
        self._open: dict = {}
        self._lock = threading.Lock()
        self._user_locks = defaultdict(threading.RLock)
        self.closed_payments: list = []

    # registry ------------------------------------------------------------
    def add_service(self, service: TransportService) -> None:
        self.services[service.service_id] = service
        self.customers.add(service.customer_id)

    def assign_station(self, station_id: str, vehicle_id: str, service_id: str) -> VehicleAccessIdentifier:
        if service_id not in self.services:
            raise NotFoundError(f"unknown service {service_id}")
        vai = VehicleAccessIdentifier(station_id, vehicle_id, service_id)
        with self._lock:
            self._registry[station_id] = vai
        return vai

    def resolve_station(self, station_id: str) -> tuple:
        with self._lock:
            vai = self._registry.get(station_id)
        if vai is None:
            raise NotFoundError(f"unknown station {station_id}")
        return vai.vehicle_id, vai.service_id

    # users and wallets -----------------------------------------------------
    def _user_lock(self, user_id: str):
        with self._lock:
            return self._user_locks[user_id]

    def register_user(self, gender, birth_date: date, payment_method_ref: str, now: float,
                      identity_key: Optional[str] = None, autocharge: bool = True):
        key = hashlib.sha256((identity_key or payment_method_ref).encode()).hexdigest()
        user = User(self._new_id("u-"), Gender(gender), birth_date, now)
        with self._lock:
            if key in self._identities:
                raise ConflictError("this person is already registered")
            self._identities[key] = user.user_id
            self.users[user.user_id] = user
            wallet = Wallet(self._new_id("w-"), user.user_id, floor=self.wallet_floor,
                            autocharge_below=Money(0) if autocharge else None)
            self.wallets[user.user_id] = wallet
        self.wallet_store.put_json("user:" + user.user_id, {
            "user_id": user.user_id, "gender": user.gender.value,
            "birth_date": user.birth_date.isoformat(), "registered_at": now,
            "identity": key, "payment_method_ref": payment_method_ref,
        })
        self._persist_wallet(wallet)
        return user, wallet

    def _persist_wallet(self, wallet: Wallet) -> None:
        self.wallet_store.put_json("wallet:" + wallet.user_id, {
            "wallet_id": wallet.wallet_id, "user_id": wallet.user_id,
            "floor": wallet.floor.amount, "blocked": wallet.blocked,
            "ledger": [[at, d.amount, ref] for at, d, ref in wallet.ledger],
        })

    def user(self, user_id: str) -> User:
        try:
            return self.users[user_id]
        except KeyError:
            raise NotFoundError(f"unknown user {user_id}") from None

    def wallet(self, user_id: str) -> Wallet:
        try:
            return self.wallets[user_id]
        except KeyError:
            raise NotFoundError(f"no wallet for {user_id}") from None

    def authorize(self, user_id: str) -> Authorization:
        wallet = self.wallets.get(user_id)
        if user_id not in self.users or wallet is None:
            return Authorization(False, "unknown-user")
        if wallet.blocked:
            return Authorization(False, "blocked")
        return Authorization(True)

    # routes ------------------------------------------------------------------
    def record_session(self, session: UserSession, payment: SessionPayment, now: float) -> Optional[RoutePayment]:
        """Attach a validated, priced session to its rider's route.

        Returns the payment of a route closed as a side effect, if any.
        """
        closed = None
        with self._user_lock(session.user_id):
            route = self._open.get(session.user_id)
            if route is not None and not extends_route(route.last_end_ts, session.start_ts, self.assembly):
                closed = self._close(session.user_id, now)
                route = None
            if route is None:
                route = _OpenRoute(self._new_id("r-"), session.user_id, session.start_ts)
                self._open[session.user_id] = route
            route.payments.append(payment)
            route.last_end_ts = max(route.last_end_ts, session.end_ts)
        return closed

    def open_route(self, user_id: str) -> Optional[UserRoute]:
        route = self._open.get(user_id)
        if route is None:
            return None
        return UserRoute(route.route_id, user_id, tuple(p.session_id for p in route.payments), route.created_at)

    def _close(self, user_id: str, now: float) -> RoutePayment:
        route = self._open.pop(user_id)
        ur = UserRoute(route.route_id, user_id, tuple(p.session_id for p in route.payments), route.created_at)
        rp = route_payment(ur, route.payments, self.discounts)
        wallet = self.wallets[user_id]
        charge_wallet(wallet, rp, now)
        self._persist_wallet(wallet)
        self.route_store.put_json(route.route_id, {
            "route_id": route.route_id, "user_id": user_id, "session_ids": list(ur.session_ids),
            "created_at": route.created_at, "closed_at": now, "amount": rp.amount.amount,
            "breakdown": [[sid, g.amount, d.amount] for sid, g, d in rp.breakdown],
        })
        for i, (sp, (_, g, d)) in enumerate(zip(route.payments, rp.breakdown)):
            service = self.services.get(sp.service_id)
            self.settlement_store.put_json(f"{route.route_id}:{i}", {
                "customer_id": service.customer_id if service else "",
                "service_id": sp.service_id, "end_ts": sp.end_ts, "net": g.amount - d.amount,
            })
        self.closed_payments.append(rp)
        return rp

    def close_route(self, user_id: str, now: float) -> Optional[RoutePayment]:
        with self._user_lock(user_id):
            if user_id not in self._open:
                return None
            return self._close(user_id, now)

    def close_expired_routes(self, now: float) -> list:
        expired = [u for u, r in list(self._open.items())
                   if now - r.last_end_ts > self.assembly.transfer_window]
        return [rp for u in expired if (rp := self.close_route(u, now)) is not None]

    def close_all_routes(self, now: float) -> list:
        return [rp for u in list(self._open) if (rp := self.close_route(u, now)) is not None]

    def routes_for(self, user_id: str) -> list:
        out = [rec for _, raw in self.route_store.items() if (rec := _json(raw))["user_id"] == user_id]
        out.sort(key=lambda r: r["created_at"])
        current = self.open_route(user_id)
        if current is not None:
            out.append({"route_id": current.route_id, "user_id": user_id,
                        "session_ids": list(current.session_ids), "created_at": current.created_at,
                        "closed_at": None, "amount": None, "breakdown": None})
        return out

    def sweep_retention(self, now: float) -> int:
        return retention_sweep(self.route_store, now, self.retention)

    # customers ---------------------------------------------------------------
    def settle_customer(self, customer_id: str, period: tuple) -> SettlementReport:
        if customer_id not in self.customers:
            raise NotFoundError(f"unknown customer {customer_id}")
        start, end = period
        total = 0
        count = 0
        for _, raw in self.settlement_store.items():
            rec = _json(raw)
            if rec["customer_id"] == customer_id and start <= rec["end_ts"] < end:
                total += rec["net"]
                count += 1
        return SettlementReport(customer_id, (start, end), Money(total), count)

"""Entity types shared by every service, plus geometric and calendar helpers."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from decimal import ROUND_HALF_UP, Decimal
from typing import Optional

from .errors import InvalidInputError, StateTransitionError

EARTH_RADIUS_KM = 6371.0


class Gender(str, enum.Enum):
    FEMALE = "female"
    MALE = "male"
    UNSPECIFIED = "unspecified"


class ServiceKind(str, enum.Enum):
    ON_BOARD = "on_board"
    TURNSTILE = "turnstile"


class SessionState(str, enum.Enum):
    ONGOING = "ongoing"
    ENDED = "ended"
    VALIDATED = "validated"
    REJECTED = "rejected"


SESSION_EDGES = {
    SessionState.ONGOING: {SessionState.ENDED},
    SessionState.ENDED: {SessionState.VALIDATED, SessionState.REJECTED},
    SessionState.VALIDATED: set(),
    SessionState.REJECTED: set(),
}


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or not (-180.0 <= self.lon <= 180.0):
            raise InvalidInputError(f"coordinates out of range: ({self.lat}, {self.lon})")
        if math.isnan(self.lat) or math.isnan(self.lon):
            raise InvalidInputError("coordinates must be numbers")

    def to_json(self) -> dict:
        return {"lat": self.lat, "lon": self.lon}

    @classmethod
    def from_json(cls, d) -> "GeoPoint":
        if isinstance(d, (list, tuple)):
            return cls(float(d[0]), float(d[1]))
        return cls(float(d["lat"]), float(d["lon"]))


@dataclass(frozen=True, order=True)
class Money:
    """Integer cents. Arithmetic never touches floats."""

    amount: int
    currency: str = "EUR"

    def __post_init__(self):
        if not isinstance(self.amount, int) or isinstance(self.amount, bool):
            raise InvalidInputError(f"money amount must be integer cents, got {self.amount!r}")

    def _check(self, other: "Money"):
        if other.currency != self.currency:
            raise InvalidInputError(f"currency mismatch {self.currency}/{other.currency}")

    def __add__(self, other: "Money") -> "Money":
        self._check(other)
        return Money(self.amount + other.amount, self.currency)

    def __sub__(self, other: "Money") -> "Money":
        self._check(other)
        return Money(self.amount - other.amount, self.currency)

    def __neg__(self) -> "Money":
        return Money(-self.amount, self.currency)

    @classmethod
    def zero(cls, currency: str = "EUR") -> "Money":
        return cls(0, currency)

    @classmethod
    def from_real(cls, cents: float, currency: str = "EUR") -> "Money":
        """The single place a real-valued amount becomes Money (half-up)."""
        return cls(round_half_up(cents), currency)

    def to_json(self) -> dict:
        return {"amount": self.amount, "currency": self.currency}


def round_half_up(x) -> int:
    return int(Decimal(repr(x) if isinstance(x, float) else str(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class FarePlan:
    """Pricing rule of a transport service.

    ``kind`` is ``"flat"`` (uses ``price``) or ``"distance"``
    (``base + per_km * km`` clamped to ``[minimum, maximum]``).
    """

    kind: str
    price: Money = Money(0)
    base: Money = Money(0)
    per_km: Money = Money(0)
    minimum: Money = Money(0)
    maximum: Money = Money(0)

    def __post_init__(self):
        if self.kind not in ("flat", "distance"):
            raise InvalidInputError(f"unknown fare plan kind {self.kind!r}")
        amounts = (self.price, self.base, self.per_km, self.minimum, self.maximum)
        if any(m.amount < 0 for m in amounts):
            raise InvalidInputError("fare amounts must be non-negative")
        if self.kind == "distance" and self.minimum.amount > self.maximum.amount:
            raise InvalidInputError("fare minimum exceeds maximum")

    @classmethod
    def flat(cls, cents: int) -> "FarePlan":
        return cls("flat", price=Money(cents))

    @classmethod
    def distance(cls, base: int, per_km: int, minimum: int, maximum: int) -> "FarePlan":
        return cls("distance", base=Money(base), per_km=Money(per_km),
                   minimum=Money(minimum), maximum=Money(maximum))

    def to_json(self) -> dict:
        if self.kind == "flat":
            return {"kind": "flat", "price": self.price.amount}
        return {"kind": "distance", "base": self.base.amount, "per_km": self.per_km.amount,
                "min": self.minimum.amount, "max": self.maximum.amount}

    @classmethod
    def from_json(cls, d: dict) -> "FarePlan":
        if d["kind"] == "flat":
            return cls.flat(int(d["price"]))
        return cls.distance(int(d["base"]), int(d["per_km"]), int(d["min"]), int(d["max"]))


@dataclass(frozen=True)
class User:
    user_id: str
    gender: Gender
    birth_date: date
    registered_at: float

    def __post_init__(self):
        if self.birth_date > utc_date(self.registered_at):
            raise InvalidInputError("birth date in the future")


@dataclass(frozen=True)
class TransportService:
    service_id: str
    customer_id: str
    kind: ServiceKind
    fare_plan: FarePlan


@dataclass(frozen=True)
class BeaconLogEntry:
    window_index: int
    present: bool
    at: float
    rssi_dbm: Optional[float] = None
    location: Optional[GeoPoint] = None
    missed_windows: int = 0


@dataclass(frozen=True)
class UserSession:
    session_id: str
    user_id: str
    service_id: str
    state: SessionState
    start_pos: GeoPoint
    start_ts: float
    end_pos: Optional[GeoPoint] = None
    end_ts: Optional[float] = None
    beacon_log: tuple = ()
    # in-memory only; never archived
    station_id: str = ""
    kind: ServiceKind = ServiceKind.ON_BOARD
    sample_period: float = 5.0

    def __post_init__(self):
        if self.end_ts is not None and self.end_ts < self.start_ts:
            raise InvalidInputError("session ends before it starts")

    @property
    def duration(self) -> float:
        return (self.end_ts if self.end_ts is not None else self.start_ts) - self.start_ts

    def transition(self, new_state: SessionState, **changes) -> "UserSession":
        if new_state not in SESSION_EDGES[self.state]:
            raise StateTransitionError(f"session {self.session_id}: {self.state.value} -> {new_state.value}")
        return replace(self, state=new_state, **changes)


@dataclass(frozen=True)
class UserRoute:
    route_id: str
    user_id: str
    session_ids: tuple
    created_at: float

    def __post_init__(self):
        if not self.session_ids:
            raise InvalidInputError("a route holds at least one session")


@dataclass(frozen=True)
class SessionPayment:
    session_id: str
    amount: Money
    plan_snapshot: FarePlan
    service_id: str = ""
    end_ts: float = 0.0

    def __post_init__(self):
        if self.amount.amount < 0:
            raise InvalidInputError("session payment cannot be negative")


@dataclass(frozen=True)
class RoutePayment:
    route_id: str
    amount: Money
    breakdown: tuple  # (session_id, gross Money, discount Money)

    def __post_init__(self):
        total = sum(g.amount - d.amount for _, g, d in self.breakdown)
        if total != self.amount.amount or self.amount.amount < 0:
            raise InvalidInputError("route payment does not match its breakdown")


@dataclass(frozen=True)
class VehicleAccessIdentifier:
    station_id: str
    vehicle_id: str
    service_id: str


@dataclass
class Wallet:
    """Mutable; owned by the wallet service which serializes access per user."""

    wallet_id: str
    user_id: str
    floor: Money = Money(-500)
    autocharge_below: Optional[Money] = None
    autocharge_amount: Money = Money(2000)
    blocked: bool = False
    ledger: list = field(default_factory=list)  # (timestamp, Money delta, reference)

    @property
    def balance(self) -> Money:
        total = Money.zero(self.floor.currency)
        for _, delta, _ in self.ledger:
            total = total + delta
        return total

    def post(self, at: float, delta: Money, reference: str) -> None:
        self.ledger.append((at, delta, reference))


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in kilometers."""
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dphi = p2 - p1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(h, 1.0)))


def age_of(birth_date: date, at: date) -> int:
    """Completed calendar years. Feb-29 birthdays complete on Mar-1 in common years."""
    if birth_date > at:
        raise InvalidInputError("birth date in the future")
    return at.year - birth_date.year - ((at.month, at.day) < (birth_date.month, birth_date.day))


def utc_date(ts: float) -> date:
    return datetime.fromtimestamp(ts, tz=timezone.utc).date()


def to_rfc3339(ts: float) -> str:
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    if dt.microsecond:
        return dt.isoformat().replace("+00:00", "Z")
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_ts(value) -> float:
    """Epoch seconds from a number or an RFC-3339 string (naive means UTC)."""
    if isinstance(value, (int, float)):
        return float(value)
    s = str(value).strip()
    try:
        return float(s)
    except ValueError:
        pass
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()

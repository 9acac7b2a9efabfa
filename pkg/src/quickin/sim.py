"""Deterministic scenario runner.

A virtual clock advances in fixed ticks. Buses move along waypoint paths,
stations advertise, riders follow their itineraries, and every rider's
application hears stations through the path-loss model. Protocol messages
reach the gateway over an in-process network that can drop requests.
Stretches of the day with nobody around are skipped.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import date
from typing import Optional

import numpy as np

from . import kernels
from .agent import AgentState, PathLossModel, ProximityConfig, RiderApp, RssiSample, next_due
from .api import ApiRequest
from .domain import (
    FarePlan,
    GeoPoint,
    Money,
    ServiceKind,
    SessionState,
    TransportService,
    haversine_distance,
    parse_ts,
)
from .errors import InvalidInputError
from .gateway import SequentialIds, VirtualClock, build_system
from .quickin_core import DiscountPolicy, RouteAssemblyConfig
from .station import Station, StationState
from .stats import rides_by_age_range
from .transit import SkimmingConfig

log = logging.getLogger(__name__)

METERS_PER_DEG_LAT = 111_195.0  # 6371 km sphere
CITY_CENTER = GeoPoint(44.3534, 11.7147)


def offset_point(p: GeoPoint, east_m: float, north_m: float) -> GeoPoint:
    dlat = north_m / METERS_PER_DEG_LAT
    dlon = east_m / (METERS_PER_DEG_LAT * math.cos(math.radians(p.lat)))
    return GeoPoint(p.lat + dlat, p.lon + dlon)


# configuration ----------------------------------------------------------------

@dataclass
class ServiceConfig:
    service_id: str
    customer_id: str
    kind: str
    fare_plan: dict

    def build(self) -> TransportService:
        return TransportService(self.service_id, self.customer_id, ServiceKind(self.kind),
                                FarePlan.from_json(self.fare_plan))


@dataclass
class VehicleConfig:
    vehicle_id: str
    station_id: str
    service_id: str
    waypoints: list  # [[lat, lon], ...]
    speed_mps: float
    depart_at: float = 0.0
    tx_power_dbm: float = -59.0
    advertising_interval: float = 1.0


@dataclass
class GateConfig:
    station_id: str
    service_id: str
    location: list  # [lat, lon]
    tx_power_dbm: float = -59.0
    advertising_interval: float = 1.0


@dataclass
class Leg:
    """One ride. ``kind`` is ``"bus"`` (vehicle_id) or ``"gate"`` (entry/exit stations).

    Times are seconds from scenario start.
    """

    kind: str
    board_at: float
    alight_at: float
    vehicle_id: Optional[str] = None
    entry_station: Optional[str] = None
    exit_station: Optional[str] = None
    seat_east_m: float = 1.0
    seat_north_m: float = 1.0
    walk_bearing_deg: float = 0.0


@dataclass
class RiderConfig:
    rider_id: str
    gender: str
    birth_date: str
    legs: list = field(default_factory=list)


@dataclass
class ScenarioConfig:
    rng_seed: int = 0
    start_time: float = 1619827200.0  # 2021-05-01T00:00:00Z
    duration: float = 86400.0
    tick: float = 1.0
    services: list = field(default_factory=list)
    vehicles: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    riders: list = field(default_factory=list)
    path_loss_exponent: float = 2.0
    noise_sigma_dbm: float = 0.0
    sensitivity_dbm: float = -95.0
    loss_probability: float = 0.0
    rssi_threshold_dbm: float = -75.0
    sample_period: float = 5.0
    loss_timeout: float = 30.0
    transfer_window: float = 3600.0
    transfer_discount: float = 0.5
    min_coverage: float = 0.6
    max_gap_windows: int = 6
    min_duration: float = 60.0
    gate_dwell: float = 3.0
    walk_time: float = 45.0
    walk_speed_mps: float = 1.4

    @property
    def n_riders(self) -> int:
        return len(self.riders)

    def validate(self) -> None:
        if self.tick <= 0 or self.duration < 0:
            raise InvalidInputError("tick must be positive and duration non-negative")
        if not (0.0 <= self.loss_probability <= 1.0):
            raise InvalidInputError("loss probability must lie in [0, 1]")
        svc_ids = {s.service_id for s in self.services}
        vehicles = {v.vehicle_id for v in self.vehicles}
        gates = {g.station_id for g in self.gates}
        for v in self.vehicles:
            if v.service_id not in svc_ids:
                raise InvalidInputError(f"vehicle {v.vehicle_id}: unknown service {v.service_id}")
            if len(v.waypoints) < 2 or v.speed_mps <= 0:
                raise InvalidInputError(f"vehicle {v.vehicle_id}: need two waypoints and positive speed")
        for g in self.gates:
            if g.service_id not in svc_ids:
                raise InvalidInputError(f"gate {g.station_id}: unknown service {g.service_id}")
        for r in self.riders:
            prev_end = -math.inf
            for leg in sorted(r.legs, key=lambda x: x.board_at):
                if leg.alight_at <= leg.board_at:
                    raise InvalidInputError(f"rider {r.rider_id}: leg ends before it starts")
                if leg.board_at < prev_end:
                    raise InvalidInputError(f"rider {r.rider_id}: overlapping legs")
                prev_end = leg.alight_at
                if leg.kind == "bus" and leg.vehicle_id not in vehicles:
                    raise InvalidInputError(f"rider {r.rider_id}: unknown vehicle {leg.vehicle_id}")
                if leg.kind == "gate" and not {leg.entry_station, leg.exit_station} <= gates:
                    raise InvalidInputError(f"rider {r.rider_id}: unknown gate")
                if leg.kind not in ("bus", "gate"):
                    raise InvalidInputError(f"rider {r.rider_id}: unknown leg kind {leg.kind}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "generate" in d:
            gen = dict(d.pop("generate"))
            base = generate_scenario(**gen)
            for k, v in d.items():
                setattr(base, k, v)
            return base
        if "start_time" in d:
            d["start_time"] = parse_ts(d["start_time"])
        d["services"] = [ServiceConfig(**s) for s in d.get("services", [])]
        d["vehicles"] = [VehicleConfig(**v) for v in d.get("vehicles", [])]
        d["gates"] = [GateConfig(**g) for g in d.get("gates", [])]
        d["riders"] = [RiderConfig(r["rider_id"], r["gender"], r["birth_date"],
                                   [Leg(**leg) for leg in r.get("legs", [])]) for r in d.get("riders", [])]
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidInputError(f"malformed scenario config: {exc}") from exc


def load_scenario(path: str) -> ScenarioConfig:
    with open(path) as fh:
        return ScenarioConfig.from_json(json.load(fh))


# generation -------------------------------------------------------------------

def _polyline_length_m(points) -> float:
    return sum(haversine_distance(GeoPoint(*a), GeoPoint(*b)) for a, b in zip(points, points[1:])) * 1000.0


def generate_scenario(seed: int = 0, n_riders: int = 100, n_buses: int = 10, n_lines: int = 2,
                      duration: float = 86400.0, **overrides) -> ScenarioConfig:
    """A day of city traffic around one center with random but valid itineraries."""
    rng = np.random.default_rng(seed)
    services = [ServiceConfig("bus", "tper", "on_board", {"kind": "flat", "price": 150})]
    for k in range(n_lines):
        services.append(ServiceConfig(f"metro-{k}", "metro", "turnstile",
                                      {"kind": "distance", "base": 100, "per_km": 20, "min": 150, "max": 400}))

    vehicles = []
    for i in range(n_buses):
        pts = [offset_point(CITY_CENTER, *rng.uniform(-2500, 2500, size=2)) for _ in range(6)]
        wp = [[p.lat, p.lon] for p in pts]
        speed = float(rng.uniform(6.0, 10.0))
        period = 2 * _polyline_length_m(wp) / speed
        vehicles.append(VehicleConfig(f"bus-{i}", f"st-bus-{i}", "bus", wp, speed,
                                      depart_at=-float(rng.uniform(0, period))))

    gates = []
    placed: list = []
    for k in range(n_lines):
        while True:
            angle = rng.uniform(0, math.pi)
            shift = rng.uniform(-1500, 1500)
            ux, uy = math.cos(angle), math.sin(angle)
            cand = [offset_point(CITY_CENTER, ux * s - uy * shift, uy * s + ux * shift)
                    for s in np.linspace(-2000, 2000, 5)]
            if all(haversine_distance(a, b) * 1000 > 200 for a in cand for b in placed):
                break
        placed.extend(cand)
        for g, p in enumerate(cand):
            gates.append(GateConfig(f"gate-{k}-{g}", f"metro-{k}", [p.lat, p.lon]))

    riders = []
    day_start, day_end = 6 * 3600.0, min(22 * 3600.0, duration - 3 * 3600.0)
    for r in range(n_riders):
        birth = date(int(rng.integers(1935, 2006)), int(rng.integers(1, 13)), int(rng.integers(1, 29)))
        gender = ["female", "male", "unspecified"][int(rng.choice(3, p=[0.48, 0.48, 0.04]))]
        legs = []
        t = float(rng.uniform(day_start, day_start + 3 * 3600))
        for _ in range(int(rng.integers(1, 4))):
            if t > day_end:
                break
            pattern = rng.choice(["bus", "bus-bus", "gate", "bus-gate"] if n_lines else ["bus", "bus-bus"])
            for part in str(pattern).split("-"):
                if part == "bus" and n_buses:
                    ride = float(rng.uniform(6, 25)) * 60
                    bearing = rng.uniform(0, 2 * math.pi)
                    dist = rng.uniform(0.5, 4.0)
                    legs.append(Leg("bus", round(t), round(t + ride), vehicle_id=f"bus-{int(rng.integers(n_buses))}",
                                    seat_east_m=float(dist * math.cos(bearing)),
                                    seat_north_m=float(dist * math.sin(bearing)),
                                    walk_bearing_deg=float(rng.uniform(0, 360))))
                else:
                    line = int(rng.integers(n_lines))
                    a, b = rng.choice(5, size=2, replace=False)
                    ride = float(rng.uniform(5, 20)) * 60
                    legs.append(Leg("gate", round(t), round(t + ride), entry_station=f"gate-{line}-{a}",
                                    exit_station=f"gate-{line}-{b}",
                                    walk_bearing_deg=float(rng.uniform(0, 360))))
                t = legs[-1].alight_at + float(rng.uniform(3, 15)) * 60
            t += float(rng.uniform(90, 240)) * 60
        riders.append(RiderConfig(f"rider-{r}", gender, birth.isoformat(), legs))

    cfg = ScenarioConfig(rng_seed=seed, duration=duration, services=services, vehicles=vehicles,
                         gates=gates, riders=riders)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


# runtime ------------------------------------------------------------------------

@dataclass
class SimMetrics:
    sessions_started: int = 0
    sessions_validated: int = 0
    sessions_rejected: int = 0
    sessions_aborted: int = 0
    sessions_orphaned: int = 0
    sessions_superseded: int = 0
    routes_closed: int = 0
    wallet_charges: int = 0
    total_charged: int = 0
    currency: str = "EUR"
    rides_by_age_range: dict = field(default_factory=dict)
    protocol_messages: dict = field(default_factory=dict)
    gateway_requests: dict = field(default_factory=dict)
    messages_lost: int = 0
    gate_opens: int = 0
    gate_refusals: int = 0
    advertisements: int = 0
    itinerary_legs: int = 0
    riders: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


class SimNetwork:
    """Delivers requests to the gateway; each request is lost with probability ``loss``."""

    def __init__(self, deliver, loss: float, rng: np.random.Generator):
        self._deliver = deliver
        self.loss = loss
        self.rng = rng
        self.lost = 0
        self.sent = 0

    def __call__(self, req: ApiRequest):
        self.sent += 1
        if self.loss > 0 and self.rng.random() < self.loss:
            self.lost += 1
            return None
        return self._deliver(req)


class _Fleet:
    """Vehicle positions along ping-pong waypoint paths."""

    def __init__(self, vehicles):
        self.vehicles = vehicles
        offsets = [0]
        cum, lat, lon, lengths = [], [], [], []
        for v in vehicles:
            pts = [GeoPoint(*p) for p in v.waypoints]
            c = [0.0]
            for a, b in zip(pts, pts[1:]):
                c.append(c[-1] + haversine_distance(a, b) * 1000.0)
            cum.extend(c)
            lat.extend(p.lat for p in pts)
            lon.extend(p.lon for p in pts)
            lengths.append(c[-1])
            offsets.append(len(cum))
        self.offsets = np.array(offsets, dtype=np.int64)
        self.cum = np.array(cum, dtype=np.float64)
        self.lat = np.array(lat, dtype=np.float64)
        self.lon = np.array(lon, dtype=np.float64)
        self.lengths = np.array(lengths, dtype=np.float64)
        self.speed = np.array([v.speed_mps for v in vehicles], dtype=np.float64)
        self.depart = np.array([v.depart_at for v in vehicles], dtype=np.float64)
        self.index = {v.vehicle_id: i for i, v in enumerate(vehicles)}

    def positions(self, t: float):
        if not self.vehicles:
            return np.empty(0), np.empty(0)
        travelled = np.maximum(t - self.depart, 0.0) * self.speed
        loop = 2.0 * self.lengths
        phase = np.mod(travelled, np.where(loop > 0, loop, 1.0))
        s = np.where(phase <= self.lengths, phase, loop - phase)
        return kernels.interpolate_polylines(self.offsets, self.cum, self.lat, self.lon, s)


class Simulation:
    def __init__(self, config: ScenarioConfig, store_dir: Optional[str] = None):
        config.validate()
        self.config = config
        c = config
        self.rng = np.random.default_rng(c.rng_seed)
        self.noise_rng = np.random.default_rng([c.rng_seed, 1])
        self.clock = VirtualClock(c.start_time)
        stations = [(v.station_id, v.vehicle_id, v.service_id) for v in c.vehicles]
        stations += [(g.station_id, g.station_id, g.service_id) for g in c.gates]
        self.gateway = build_system(
            [s.build() for s in c.services], stations, store_dir=store_dir, clock=self.clock,
            new_id=SequentialIds(),
            skimming=SkimmingConfig(c.min_coverage, c.max_gap_windows, c.min_duration),
            assembly=RouteAssemblyConfig(c.transfer_window),
            discounts=DiscountPolicy(transfer_discount=c.transfer_discount),
            orphan_timeout=5 * c.loss_timeout,
        )
        # agents and stations see only this callable, never the gateway object
        self.network = SimNetwork(self.gateway.route_request, c.loss_probability,
                                  np.random.default_rng([c.rng_seed, 2]))
        self.fleet = _Fleet(c.vehicles)
        self.stations: list = []
        for v in c.vehicles:
            st = StationState(v.station_id, ServiceKind.ON_BOARD, GeoPoint(*v.waypoints[0]), c.start_time,
                              v.advertising_interval, v.tx_power_dbm)
            self.stations.append(Station(st))
        self.gates: dict = {}
        for g in c.gates:
            st = StationState(g.station_id, ServiceKind.TURNSTILE, GeoPoint(*g.location), c.start_time,
                              g.advertising_interval, g.tx_power_dbm)
            station = Station(st, authorize=self._gate_authorizer(g.station_id))
            self.stations.append(station)
            self.gates[g.station_id] = station
        self.tx = np.array([s.state.tx_power_dbm for s in self.stations], dtype=np.float64)
        self.proximity = ProximityConfig(c.rssi_threshold_dbm, c.sample_period, c.loss_timeout)
        self.path_loss = PathLossModel(-59.0, c.path_loss_exponent, c.noise_sigma_dbm, c.rng_seed)
        self.apps: list = []
        self.user_ids: list = []
        self.events: list = []
        self.outcomes: list = []
        self.charges: list = []
        self.advertisements = 0
        self._last_adv: dict = {}
        self.gateway.listeners.append(self._on_gateway_event)
        self._windows = self._presence_windows()
        pairs = [(a, b, i) for i, w in enumerate(self._windows) for a, b in w]
        self._win_start = np.array([a for a, _, _ in pairs], dtype=np.float64)
        self._win_end = np.array([b for _, b, _ in pairs], dtype=np.float64)
        self._win_rider = np.array([i for _, _, i in pairs], dtype=np.int64)
        self._busy_set: set = set()
        self._admitted: set = set()  # (rider index, leg index) of gate rides whose entry opened

    # wiring -----------------------------------------------------------------
    def _gate_authorizer(self, station_id: str):
        def authorize(token: str, direction: str) -> str:
            resp = self.network(ApiRequest("POST", "/v1/turnstile/authorize", token,
                                           {"station_id": station_id, "direction": direction}))
            if resp is None or resp.status >= 500:
                return "unreachable"
            if resp.ok and resp.body.get("decision") == "granted":
                return "granted"
            return "denied"
        return authorize

    def _on_gateway_event(self, event: str, payload: dict) -> None:
        if event == "finalized":
            s = payload["outcome"].session
            self.outcomes.append((s.user_id, s.station_id, s.start_ts, s.end_ts, s.state.value,
                                  payload["outcome"].skim.reason))
        elif event == "charged":
            self.charges.append(payload["payment"])

    def _presence_windows(self) -> list:
        """Per rider: sorted (start, end) intervals in which the rider can be heard."""
        c = self.config
        out = []
        for r in c.riders:
            w = []
            for leg in r.legs:
                b, a = c.start_time + leg.board_at, c.start_time + leg.alight_at
                if leg.kind == "bus":
                    w.append((b, a + c.walk_time))
                else:
                    w.append((b, b + c.gate_dwell))
                    w.append((a, a + c.gate_dwell + c.walk_time))
            out.append(sorted(w))
        return out

    def _rider_position(self, rider_index: int, t: float, vlat, vlon) -> Optional[GeoPoint]:
        rider = self.config.riders[rider_index]
        c = self.config
        rel = t - c.start_time
        for j, leg in enumerate(rider.legs):
            if leg.kind == "bus":
                if leg.board_at <= rel <= leg.alight_at:
                    i = self.fleet.index[leg.vehicle_id]
                    return offset_point(GeoPoint(float(vlat[i]), float(vlon[i])), leg.seat_east_m, leg.seat_north_m)
                if leg.alight_at < rel <= leg.alight_at + c.walk_time:
                    i = self.fleet.index[leg.vehicle_id]
                    lat, lon = self.fleet_position_at(i, c.start_time + leg.alight_at)
                    origin = offset_point(GeoPoint(lat, lon), leg.seat_east_m, leg.seat_north_m)
                    return self._walk(origin, leg, rel - leg.alight_at)
            else:
                if leg.board_at <= rel <= leg.board_at + c.gate_dwell:
                    return offset_point(GeoPoint(*self._gate_loc(leg.entry_station)), 0.7, 0.7)
                if (rider_index, j) not in self._admitted:
                    continue
                if leg.alight_at <= rel <= leg.alight_at + c.gate_dwell:
                    return offset_point(GeoPoint(*self._gate_loc(leg.exit_station)), 0.7, 0.7)
                if leg.alight_at + c.gate_dwell < rel <= leg.alight_at + c.gate_dwell + c.walk_time:
                    origin = offset_point(GeoPoint(*self._gate_loc(leg.exit_station)), 0.7, 0.7)
                    return self._walk(origin, leg, rel - leg.alight_at - c.gate_dwell)
        return None

    def _walk(self, origin: GeoPoint, leg: Leg, dt: float) -> GeoPoint:
        d = self.config.walk_speed_mps * dt
        th = math.radians(leg.walk_bearing_deg)
        return offset_point(origin, d * math.sin(th), d * math.cos(th))

    def _gate_loc(self, station_id: str):
        return self.gates[station_id].state.last_fix.lat, self.gates[station_id].state.last_fix.lon

    def fleet_position_at(self, i: int, t: float):
        lat, lon = self.fleet.positions(t)
        return float(lat[i]), float(lon[i])

    # main loop ----------------------------------------------------------------
    def _register_riders(self) -> None:
        for r in self.config.riders:
            resp = self.gateway.route_request(ApiRequest("POST", "/v1/users", body={
                "gender": r.gender, "birth_date": r.birth_date,
                "payment_method_ref": f"card:{r.rider_id}", "identity_key": r.rider_id}))
            if resp.status != 201:
                raise InvalidInputError(f"registration of {r.rider_id} failed: {resp.body}")
            uid = resp.body["user_id"]
            self.user_ids.append(uid)
            app = RiderApp(AgentState(uid, self.proximity), resp.body["token"], self.network, self.gates)
            app.on_event = self._app_event(uid, len(self.apps))
            self.apps.append(app)

    def _app_event(self, uid: str, rider_index: int):
        rider = self.config.riders[rider_index]

        def record(kind: str, info: dict) -> None:
            self.events.append((uid, kind, info))
            if kind == "gate" and info["direction"] == "entry" and info["decision"] == "open":
                # only an opened turnstile lets the rider into that ride
                rel = info["at"] - self.config.start_time
                for j, leg in enumerate(rider.legs):
                    if (leg.kind == "gate" and leg.entry_station == info["station_id"]
                            and leg.board_at <= rel <= leg.board_at + self.config.gate_dwell):
                        self._admitted.add((rider_index, j))
        return record

    def _present_riders(self, t: float) -> list:
        mask = (self._win_start <= t) & (t <= self._win_end)
        return np.unique(self._win_rider[mask]).tolist()

    def _next_presence(self, t: float) -> Optional[float]:
        later = self._win_start[self._win_start > t]
        return float(later.min()) if later.size else None

    def step(self, t: float) -> None:
        c = self.config
        self.clock.set(t)
        vlat, vlon = self.fleet.positions(t)
        for i, station in enumerate(self.stations[: len(c.vehicles)]):
            station.on_gps_fix(GeoPoint(float(vlat[i]), float(vlon[i])), t)
        for station in self.stations:
            adv = station.on_tick(t)
            if adv is not None:
                self._last_adv[station.station_id] = adv
                self.advertisements += 1

        present = self._present_riders(t) if self.apps else []
        heard = {}
        if present and self.stations:
            pos = [self._rider_position(i, t, vlat, vlon) for i in present]
            keep = [k for k, p in enumerate(pos) if p is not None]
            present = [present[k] for k in keep]
            pos = [pos[k] for k in keep]
        if present and self.stations:
            rlat = np.array([p.lat for p in pos])
            rlon = np.array([p.lon for p in pos])
            slat = np.concatenate([vlat, [g.state.last_fix.lat for g in self.stations[len(c.vehicles):]]])
            slon = np.concatenate([vlon, [g.state.last_fix.lon for g in self.stations[len(c.vehicles):]]])
            dist = kernels.distance_matrix_m(rlat, rlon, slat, slon)
            rssi = kernels.rssi_matrix(dist, self.tx, c.path_loss_exponent)
            if c.noise_sigma_dbm > 0:
                rssi = rssi + self.noise_rng.normal(0.0, c.noise_sigma_dbm, size=rssi.shape)
            for row, i in enumerate(present):
                cols = np.nonzero(rssi[row] >= c.sensitivity_dbm)[0]
                if cols.size:
                    order = cols[np.argsort(-rssi[row, cols], kind="stable")]
                    heard[i] = [RssiSample(self.stations[j].station_id, float(rssi[row, j]), t,
                                           self._last_adv[self.stations[j].station_id]) for j in order]
        for i in sorted(self._busy_set.union(heard)):
            app = self.apps[i]
            app.feed(heard.get(i, []), t)
            if app.state.phase != "idle" or app.state.suppressed is not None:
                self._busy_set.add(i)
            else:
                self._busy_set.discard(i)
        self.gateway.run_background(t)

    def _busy(self) -> bool:
        return bool(self._busy_set)

    def _next_wakeup(self, t: float) -> Optional[float]:
        """Earliest time after which a step can change anything: a rider shows up or an agent timer fires."""
        due = [d for d in (next_due(self.apps[i].state) for i in self._busy_set) if d is not None]
        nxt = self._next_presence(t)
        if nxt is not None:
            due.append(nxt)
        return max(min(due), t) if due else None

    def _advance(self, t: float, limit: float) -> Optional[float]:
        """Next tick-grid time to simulate, skipping stretches where nothing can happen."""
        if self._present_riders(t):
            return t
        nxt = self._next_wakeup(t)
        if nxt is None:
            return None
        c = self.config
        nxt = c.start_time + math.ceil((nxt - c.start_time) / c.tick - 1e-9) * c.tick
        if nxt > limit:
            return None
        if nxt > t:
            self.gateway.run_background(nxt)
        return nxt

    def run(self) -> SimMetrics:
        c = self.config
        self.clock.set(c.start_time)
        self._register_riders()
        t = c.start_time
        end = c.start_time + c.duration
        while t <= end:
            nxt = self._advance(t, end)
            if nxt is None:
                break
            t = nxt
            self.step(t)
            t += c.tick
        # let in-flight sessions end on the agents' own timers, then settle everything
        limit = t + self.proximity.gate_timeout + 5 * c.loss_timeout
        while self._busy() and t <= limit:
            nxt = self._advance(t, limit)
            if nxt is None:
                break
            t = nxt
            self.step(t)
            t += c.tick
        self.clock.set(t)
        self.gateway.flush(t)
        return self.metrics()

    def metrics(self) -> SimMetrics:
        gw = self.gateway
        records = [r for tr in gw.transits.values() for r in tr.completed.records()]
        sent = Counter()
        for app in self.apps:
            sent.update(app.sent)
        opens = sum(1 for g in self.gates.values() for e in g.gate_log if e[3] == "open")
        refusals = sum(1 for g in self.gates.values() for e in g.gate_log if e[3] != "open")
        return SimMetrics(
            sessions_started=gw.counters["sessions_started"],
            sessions_validated=gw.counters["sessions_validated"],
            sessions_rejected=gw.counters["sessions_rejected"],
            sessions_aborted=gw.counters["sessions_aborted"],
            sessions_orphaned=gw.counters["sessions_orphaned"],
            sessions_superseded=gw.counters["sessions_superseded"],
            routes_closed=gw.counters["routes_closed"],
            wallet_charges=len(self.charges),
            total_charged=gw.total_wallet_debits(),
            rides_by_age_range=rides_by_age_range(records),
            protocol_messages=dict(sorted(sent.items())),
            gateway_requests=dict(sorted(gw.messages.items())),
            messages_lost=self.network.lost,
            gate_opens=opens,
            gate_refusals=refusals,
            advertisements=self.advertisements,
            itinerary_legs=sum(len(r.legs) for r in self.config.riders),
            riders=self.config.n_riders,
        )


def run_scenario(config: ScenarioConfig, store_dir: Optional[str] = None) -> SimMetrics:
    return Simulation(config, store_dir).run()

import json

import pytest
from hypothesis import given, strategies as st

from quickin.domain import GeoPoint, ServiceKind
from quickin.errors import InvalidInputError, ModeError, SchedulingError
from quickin.station import (
    Station,
    StationState,
    handle_open_request,
    load_station_config,
    next_advertisement,
    update_location,
)


def _state(mode=ServiceKind.ON_BOARD, **kw):
    return StationState("st-1", mode, GeoPoint(44.35, 11.71), 0.0, **kw)


def test_seq_increments():
    s = _state(seq=5)
    assert next_advertisement(s, 10.0).seq == 6


def test_stale_boundary_is_exclusive():
    s = _state()
    s.last_fix_at = 880.0
    assert next_advertisement(s, 1000.0).stale
    s2 = _state()
    s2.last_fix_at = 940.0
    assert not next_advertisement(s2, 1000.0).stale


def test_consecutive_advertisements_increase():
    s = _state()
    a, b = next_advertisement(s, 1.0), next_advertisement(s, 2.0)
    assert b.seq > a.seq and b.emitted_at > a.emitted_at


def test_early_call_is_a_scheduling_error():
    s = _state(advertising_interval=1.0)
    next_advertisement(s, 1.0)
    with pytest.raises(SchedulingError):
        next_advertisement(s, 1.5)


def test_update_location():
    s = _state()
    update_location(s, GeoPoint(44.35, 11.71), 5.0)
    assert s.last_fix == GeoPoint(44.35, 11.71)
    with pytest.raises(InvalidInputError):
        update_location(s, (91.0, 0.0), 6.0)
    assert s.last_fix == GeoPoint(44.35, 11.71) and s.last_fix_at == 5.0
    update_location(s, GeoPoint(44.0, 11.0), 1.0)
    assert s.last_fix == GeoPoint(44.35, 11.71)


@pytest.mark.parametrize("auth, decision, reason", [
    ("granted", "open", "granted"),
    ("denied", "keep_closed", "denied"),
    ("unreachable", "keep_closed", "fail-closed"),
])
def test_gate_mapping(auth, decision, reason):
    cmd = handle_open_request(_state(ServiceKind.TURNSTILE), auth)
    assert (cmd.decision, cmd.reason) == (decision, reason)


def test_on_board_station_has_no_gate():
    with pytest.raises(ModeError):
        handle_open_request(_state(), "granted")
    with pytest.raises(ModeError):
        Station(_state(), authorize=lambda t, d: "granted").on_open_request("tok", "entry", 0.0)


@given(st.lists(st.floats(0.0, 5.0), min_size=1, max_size=60), st.sampled_from([0.5, 1.0, 2.0]))
def test_advertisement_stream_has_no_seq_gaps(steps, interval):
    station = Station(_state(advertising_interval=interval))
    t, seqs = 0.0, []
    for dt in steps:
        t += dt
        adv = station.on_tick(t)
        if adv is not None:
            seqs.append(adv.seq)
    assert seqs == list(range(1, len(seqs) + 1))


@given(st.lists(st.sampled_from(["granted", "denied", "unreachable"]), max_size=30))
def test_gate_opens_only_when_granted(outcomes):
    replies = iter(outcomes)
    station = Station(_state(ServiceKind.TURNSTILE), authorize=lambda tok, d: next(replies))
    for i in range(len(outcomes)):
        station.on_open_request("tok", "entry", float(i))
    for _, _, outcome, decision in station.gate_log:
        assert (decision == "open") == (outcome == "granted")


def test_station_without_server_fails_closed():
    station = Station(_state(ServiceKind.TURNSTILE))
    assert station.on_open_request("tok", "exit", 0.0).decision == "keep_closed"


def test_load_config(tmp_path):
    p = tmp_path / "station.json"
    p.write_text(json.dumps({"station_id": "gate-1", "mode": "turnstile",
                             "initial_fix": [44.35, 11.71], "interval": 0.5, "tx_power": -62}))
    s = load_station_config(str(p))
    assert s.mode is ServiceKind.TURNSTILE and s.advertising_interval == 0.5 and s.tx_power_dbm == -62
    with pytest.raises(InvalidInputError):
        load_station_config({"station_id": "x", "initial_fix": [0, 0], "interval": 0})

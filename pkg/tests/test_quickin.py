from datetime import date
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from quickin.domain import (
    FarePlan,
    GeoPoint,
    Money,
    RoutePayment,
    ServiceKind,
    SessionPayment,
    SessionState,
    TransportService,
    UserRoute,
    UserSession,
    Wallet,
)
from quickin.errors import ConflictError, InvalidInputError, NotFoundError
from quickin.privacy import AnonymizedSessionRecord, CompletedSessionStore, EncryptedStore, KeyService
from quickin.quickin_core import (
    DAY,
    DiscountPolicy,
    QuickinCore,
    RetentionConfig,
    RouteAssemblyConfig,
    Subscription,
    charge_wallet,
    route_payment,
    retention_sweep,
    wallet_debits,
)
from quickin.store import KVStore

T0 = 1619827200.0
P = GeoPoint(44.35, 11.71)


def make_core(**kw):
    keys = KeyService()
    ids = iter(range(1, 100_000))
    qc = QuickinCore(EncryptedStore(KVStore(), keys), EncryptedStore(KVStore(), keys),
                     EncryptedStore(KVStore(), keys), new_id=lambda p: f"{p}{next(ids)}", **kw)
    qc.add_service(TransportService("bus", "tper", ServiceKind.ON_BOARD, FarePlan.flat(150)))
    qc.add_service(TransportService("metro", "metro", ServiceKind.TURNSTILE, FarePlan.distance(100, 10, 150, 400)))
    return qc


def validated(sid, user, start, end, service="bus"):
    return UserSession(sid, user, service, SessionState.VALIDATED, P, start, P, end)


def pay(session, cents):
    return SessionPayment(session.session_id, Money(cents), FarePlan.flat(cents), session.service_id, session.end_ts)


def register(qc, key="alice", **kw):
    return qc.register_user("female", date(1990, 1, 1), "card:" + key, T0, **kw)


# registration and authorization ---------------------------------------------

def test_fresh_wallet_is_empty():
    _, wallet = register(make_core())
    assert wallet.balance.amount == 0


def test_duplicate_identity_conflicts():
    qc = make_core()
    register(qc)
    with pytest.raises(ConflictError):
        register(qc)


def test_future_birth_date():
    with pytest.raises(InvalidInputError):
        make_core().register_user("male", date(2030, 1, 1), "card:x", T0)


def test_identity_is_stored_hashed():
    qc = make_core()
    user, _ = register(qc, identity_key="national-id-123")
    raw = qc.wallet_store.get("user:" + user.user_id).decode()
    assert "national-id-123" not in raw


def test_authorize():
    qc = make_core()
    user, wallet = register(qc)
    assert qc.authorize(user.user_id).granted
    wallet.blocked = True
    assert qc.authorize(user.user_id).reason == "blocked"
    assert qc.authorize("ghost").reason == "unknown-user"


def test_station_registry_remap():
    qc = make_core()
    qc.assign_station("st-1", "bus-7", "bus")
    assert qc.resolve_station("st-1") == ("bus-7", "bus")
    qc.assign_station("st-1", "train-2", "metro")
    assert qc.resolve_station("st-1") == ("train-2", "metro")
    with pytest.raises(NotFoundError):
        qc.resolve_station("st-9")
    with pytest.raises(NotFoundError):
        qc.assign_station("st-2", "x", "ferry")


# routes ------------------------------------------------------------------------

def test_twenty_minute_transfer_extends_route():
    qc = make_core()
    user, _ = register(qc)
    u = user.user_id
    a = validated("s1", u, T0, T0 + 600)
    b = validated("s2", u, T0 + 600 + 1200, T0 + 2400)
    assert qc.record_session(a, pay(a, 150), T0 + 700) is None
    assert qc.record_session(b, pay(b, 150), T0 + 2500) is None
    assert qc.open_route(u).session_ids == ("s1", "s2")
    (rp,) = qc.close_expired_routes(T0 + 2400 + 3601)
    assert rp.amount.amount == 225


def test_ninety_minute_gap_splits_routes():
    qc = make_core()
    user, _ = register(qc)
    u = user.user_id
    a = validated("s1", u, T0, T0 + 600)
    b = validated("s2", u, T0 + 600 + 5400, T0 + 6600)
    qc.record_session(a, pay(a, 150), T0 + 700)
    closed = qc.record_session(b, pay(b, 150), T0 + 6700)
    assert closed is not None and closed.amount.amount == 150
    assert qc.open_route(u).session_ids == ("s2",)


def test_single_session_route_closes_after_window():
    qc = make_core()
    user, wallet = register(qc, autocharge=False)
    a = validated("s1", user.user_id, T0, T0 + 600)
    qc.record_session(a, pay(a, 150), T0 + 700)
    assert qc.close_expired_routes(T0 + 600 + 3600) == []
    (rp,) = qc.close_expired_routes(T0 + 600 + 3601)
    assert rp.breakdown == (("s1", Money(150), Money(0)),)
    assert wallet.balance.amount == -150


def test_routes_are_owner_scoped():
    qc = make_core()
    alice, _ = register(qc, "alice")
    bob, _ = register(qc, "bob")
    a = validated("s1", alice.user_id, T0, T0 + 600)
    qc.record_session(a, pay(a, 150), T0 + 700)
    qc.close_all_routes(T0 + 800)
    assert len(qc.routes_for(alice.user_id)) == 1
    assert qc.routes_for(bob.user_id) == []


# pricing -------------------------------------------------------------------------

def _route(*cents, user="u", services=None):
    services = services or ["bus"] * len(cents)
    sps = [SessionPayment(f"s{i}", Money(c), FarePlan.flat(c), svc, T0 + i) for i, (c, svc) in
           enumerate(zip(cents, services))]
    return UserRoute("r", user, tuple(sp.session_id for sp in sps), T0), sps


def test_single_session_full_price():
    assert route_payment(*_route(150)).amount.amount == 150


def test_transfer_discount():
    rp = route_payment(*_route(150, 150), DiscountPolicy(Fraction(1, 2)))
    assert rp.amount.amount == 225


def test_subscription_is_free():
    policy = DiscountPolicy(subscriptions=[Subscription("u", "metro", T0 - DAY, T0 + DAY)])
    rp = route_payment(*_route(224, 150, services=["metro", "bus"]), policy)
    # the bus ride is the first paid session, so it is not discounted
    assert rp.breakdown[0][2].amount == 224 and rp.amount.amount == 150


def test_discount_rounds_half_up():
    rp = route_payment(*_route(150, 151), DiscountPolicy(Fraction(1, 2)))
    assert rp.breakdown[1][2].amount == 76


@given(st.lists(st.integers(0, 1000), min_size=1, max_size=8), st.fractions(0, 1))
def test_discounts_never_raise_price(cents, ratio):
    rp = route_payment(*_route(*cents), DiscountPolicy(ratio))
    assert 0 <= rp.amount.amount <= sum(cents)


# wallets -----------------------------------------------------------------------

def _rp(cents):
    return RoutePayment("r", Money(cents), (("s", Money(cents), Money(0)),))


def _wallet(balance):
    w = Wallet("w", "u")
    if balance:
        w.post(0.0, Money(balance), "topup")
    return w


@pytest.mark.parametrize("start, charge, end, blocked", [
    (1000, 225, 775, False),
    (100, 225, -125, False),
    (-400, 225, -625, True),
])
def test_charge_wallet(start, charge, end, blocked):
    w = charge_wallet(_wallet(start), _rp(charge), 1.0)
    assert (w.balance.amount, w.blocked) == (end, blocked)
    assert wallet_debits(w) == charge


def test_autocharge_keeps_wallet_usable():
    w = Wallet("w", "u", autocharge_below=Money(0), autocharge_amount=Money(2000))
    charge_wallet(w, _rp(225), 1.0)
    assert w.balance.amount == 1775 and not w.blocked


# retention -----------------------------------------------------------------------

@pytest.mark.parametrize("age_days, kept", [(31, False), (29, True), (30, False)])
def test_retention_boundary(age_days, kept):
    store = EncryptedStore(KVStore(), KeyService())
    now = T0 + 100 * DAY
    store.put_json("r1", {"created_at": now - age_days * DAY})
    assert retention_sweep(store, now, RetentionConfig(30)) == (0 if kept else 1)
    assert (store.get("r1") is not None) == kept


def test_retention_leaves_completed_store_alone():
    qc = make_core()
    keys = KeyService()
    completed = CompletedSessionStore(KVStore(), keys)
    completed.archive(AnonymizedSessionRecord("female", "25-34", P, P, T0, T0 + 60))
    qc.route_store.put_json("old", {"created_at": T0, "user_id": "u"})
    assert qc.sweep_retention(T0 + 40 * DAY) == 1
    assert len(completed) == 1


# settlement ----------------------------------------------------------------------

def test_settlement_totals():
    qc = make_core(discounts=DiscountPolicy(Fraction(0)))
    user, _ = register(qc)
    u = user.user_id
    a = validated("s1", u, T0, T0 + 600, "bus")
    b = validated("s2", u, T0 + 900, T0 + 1800, "metro")
    qc.record_session(a, pay(a, 150), T0 + 700)
    qc.record_session(b, pay(b, 224), T0 + 1900)
    qc.close_all_routes(T0 + 2000)
    # settlement is per customer; check each and their sum
    bus = qc.settle_customer("tper", (T0, T0 + DAY))
    metro = qc.settle_customer("metro", (T0, T0 + DAY))
    assert (bus.total.amount + metro.total.amount, bus.session_count + metro.session_count) == (374, 2)
    empty = qc.settle_customer("tper", (T0 + DAY, T0 + 2 * DAY))
    assert (empty.total.amount, empty.session_count) == (0, 0)
    assert qc.settle_customer("tper", (T0, T0 + 600)).session_count == 0


def test_settlement_sums_one_customer():
    qc = make_core(discounts=DiscountPolicy(Fraction(0)))
    qc.add_service(TransportService("tram", "tper", ServiceKind.ON_BOARD, FarePlan.flat(224)))
    user, _ = register(qc)
    u = user.user_id
    a = validated("s1", u, T0, T0 + 600, "bus")
    b = validated("s2", u, T0 + 900, T0 + 1800, "tram")
    qc.record_session(a, pay(a, 150), T0 + 700)
    qc.record_session(b, pay(b, 224), T0 + 1900)
    qc.close_all_routes(T0 + 2000)
    rep = qc.settle_customer("tper", (T0, T0 + DAY))
    assert (rep.total.amount, rep.session_count) == (374, 2)
    with pytest.raises(NotFoundError):
        qc.settle_customer("nobody", (T0, T0 + DAY))


@given(st.lists(st.tuples(st.integers(0, 400), st.integers(60, 4000), st.booleans()), min_size=1, max_size=12))
def test_money_is_conserved(rides):
    qc = make_core()
    users = [register(qc, k)[0].user_id for k in ("a", "b")]
    t = T0
    for i, (cents, gap, second) in enumerate(rides):
        u = users[int(second)]
        s = validated(f"s{i}", u, t, t + 300, "bus" if i % 2 else "metro")
        qc.record_session(s, pay(s, cents), t + 400)
        qc.close_expired_routes(t + 400)
        t += 300 + gap
    qc.close_all_routes(t + 10)
    debits = sum(wallet_debits(w) for w in qc.wallets.values())
    routes = sum(rp.amount.amount for rp in qc.closed_payments)
    settled = sum(qc.settle_customer(c, (float("-inf"), float("inf"))).total.amount for c in qc.customers)
    assert debits == routes == settled

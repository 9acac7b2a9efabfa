import math

import pytest

from quickin.domain import FarePlan, GeoPoint, ServiceKind, TransportService

EARTH_R = 6371.0


def chord_km(a, b):
    """Great-circle distance through the 3-D chord; independent of the haversine form."""
    def xyz(p):
        la, lo = math.radians(p[0]), math.radians(p[1])
        return (math.cos(la) * math.cos(lo), math.cos(la) * math.sin(lo), math.sin(la))
    pa, pb = xyz(a), xyz(b)
    c = math.sqrt(sum((u - v) ** 2 for u, v in zip(pa, pb)))
    return 2.0 * EARTH_R * math.asin(min(c / 2.0, 1.0))


@pytest.fixture
def bus_service():
    return TransportService("bus", "tper", ServiceKind.ON_BOARD, FarePlan.flat(150))


@pytest.fixture
def metro_service():
    return TransportService("metro", "metro", ServiceKind.TURNSTILE, FarePlan.distance(100, 20, 150, 400))


@pytest.fixture
def city_center():
    return GeoPoint(44.3534, 11.7147)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

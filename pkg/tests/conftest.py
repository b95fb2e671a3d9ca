import math

import pytest
from hypothesis import settings

from cfmm_rebalance.fixtures import path
from cfmm_rebalance.model import CfmmState, Configuration, Mode, TradingFunction
from cfmm_rebalance.serialization import load_scenario

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def triangle(pools=((1, 3), (1, 3), (1, 3)), modes=(Mode.ACTIVE,) * 3) -> Configuration:
    """A: (EUR, USD), B: (GBP, EUR), C: (USD, GBP), all constant product."""
    pairs = (("EUR", "USD"), ("GBP", "EUR"), ("USD", "GBP"))
    return Configuration(
        tuple(CfmmState(p, t, mode=m, name=n) for p, t, m, n in zip(pools, pairs, modes, "ABC"))
    )


def oracle_triangle(depth=1000.0) -> Configuration:
    return Configuration(
        (
            CfmmState((1, 3), ("EUR", "USD"), name="A"),
            CfmmState((1, 3), ("GBP", "EUR"), mode=Mode.PASSIVE, name="B"),
            CfmmState((depth, depth), ("USD", "GBP"), TradingFunction.linear(1, 1), mode=Mode.ORACLE, name="C"),
        )
    )


@pytest.fixture
def tri():
    return triangle()


@pytest.fixture
def tri_rebalanced():
    return triangle(((2, 2), (2, 2), (2, 2)))


@pytest.fixture
def mixed():
    return triangle(modes=(Mode.ACTIVE, Mode.PASSIVE, Mode.PASSIVE))


@pytest.fixture
def oracle():
    return oracle_triangle()


@pytest.fixture
def fixture_config():
    def load(name):
        return load_scenario(path(name))[0]

    return load


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def close(a, b, tol):
    return math.isclose(a, b, rel_tol=0, abs_tol=tol)


def pytest_terminal_summary(terminalreporter):
    from .test_acceptance import SUMMARY

    if SUMMARY:
        terminalreporter.section("acceptance criteria")
        for line in sorted(SUMMARY, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

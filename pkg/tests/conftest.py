import numpy as np
import pytest

from zdt.flow_data import FlowRecord


def flow(src, dst, ts=0, sport=40000, dport=80, dur=1.0, fwd=100, bwd=200, label=None):
    return FlowRecord(ts, src, dst, sport, dport, dur, fwd, bwd, label)


def clique_flows(hosts, both_ways=True):
    out = []
    for i, u in enumerate(hosts):
        for v in hosts[i + 1:]:
            out.append(flow(u, v))
            if both_ways:
                out.append(flow(v, u))
    return out


@pytest.fixture
def two_cliques():
    a = [f"a{i}" for i in range(4)]
    b = [f"b{i}" for i in range(4)]
    return clique_flows(a) + clique_flows(b) + [flow("a0", "b0"), flow("b0", "a0")]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

from pathlib import Path

import pytest

from asyncadmm import caseio
from asyncadmm.engine import EventTrace, TraceEvent

CASES_DIR = Path(__file__).resolve().parent.parent / "cases"


@pytest.fixture(scope="session")
def chain3_text() -> str:
    return (CASES_DIR / "chain3.case").read_text()


@pytest.fixture(scope="session")
def chain3_partition_text() -> str:
    return (CASES_DIR / "chain3.part").read_text()


@pytest.fixture(scope="session")
def ring5_text() -> str:
    return (CASES_DIR / "ring5.case").read_text()


@pytest.fixture(scope="session")
def ring5_partition_text() -> str:
    return (CASES_DIR / "ring5.part").read_text()


@pytest.fixture(scope="session")
def chain3_case(chain3_text):
    return caseio.parse_case(chain3_text)


@pytest.fixture(scope="session")
def ring5_case(ring5_text):
    return caseio.parse_case(ring5_text)


def event(kind, worker, local_iter, time, **payload) -> TraceEvent:
    return TraceEvent(kind, worker, local_iter, float(time), payload)


def staggered_trace() -> EventTrace:
    """Three fully-connected workers with staggered compute times (2, 3 and
    5 ms) and 0.5 ms links, traced for 10 ms.

    The slicing was derived by hand for this exact event sequence:
    boundaries at 0, 5, 6 and 9; updater sets {1,2,3}, {1,2}, {1,2}, {1,3};
    delay window 3 (worker 3 starts its second update in slot 1 and finishes
    it in slot 4).
    """
    events = [
        event("compute_start", 1, 0, 0.0), event("compute_start", 2, 0, 0.0),
        event("compute_start", 3, 0, 0.0),
        event("compute_end", 1, 0, 2.0),
        event("send", 1, 0, 2.0, to=2), event("send", 1, 0, 2.0, to=3),
        event("receive", 2, 0, 2.5, frm=1), event("receive", 3, 0, 2.5, frm=1),
        event("compute_end", 2, 0, 3.0),
        event("send", 2, 0, 3.0, to=1), event("send", 2, 0, 3.0, to=3),
        event("compute_start", 2, 1, 3.0),
        event("receive", 1, 0, 3.5, frm=2), event("compute_start", 1, 1, 3.5),
        event("receive", 3, 0, 3.5, frm=2),
        event("compute_end", 3, 0, 5.0),
        event("send", 3, 0, 5.0, to=1), event("send", 3, 0, 5.0, to=2),
        event("compute_start", 3, 1, 5.0),
        event("compute_end", 1, 1, 5.5),
        event("send", 1, 1, 5.5, to=2), event("send", 1, 1, 5.5, to=3),
        event("receive", 1, 1, 5.5, frm=3), event("compute_start", 1, 2, 5.5),
        event("receive", 2, 1, 5.5, frm=3),
        event("compute_end", 2, 1, 6.0),
        event("send", 2, 1, 6.0, to=1), event("send", 2, 1, 6.0, to=3),
        event("compute_start", 2, 2, 6.0),
        event("receive", 2, 2, 6.0, frm=1), event("receive", 3, 1, 6.0, frm=1),
        event("receive", 1, 2, 6.5, frm=2), event("receive", 3, 1, 6.5, frm=2),
        event("compute_end", 1, 2, 7.5),
        event("send", 1, 2, 7.5, to=2), event("send", 1, 2, 7.5, to=3),
        event("compute_start", 1, 3, 7.5),
        event("receive", 2, 2, 8.0, frm=1), event("receive", 3, 1, 8.0, frm=1),
        event("compute_end", 2, 2, 9.0),
        event("send", 2, 2, 9.0, to=1), event("send", 2, 2, 9.0, to=3),
        event("compute_start", 2, 3, 9.0),
        event("compute_end", 1, 3, 9.5),
        event("receive", 1, 3, 9.5, frm=2), event("compute_start", 1, 4, 9.5),
        event("compute_end", 3, 1, 10.0),
    ]
    return EventTrace(
        meta={"k": 3, "edges": [], "x0": [[0.0], [0.0], [0.0]], "z0": []},
        events=events, status="incomplete", end_time=10.0,
    )


STAGGERED_BOUNDARIES = [0.0, 5.0, 6.0, 9.0]
STAGGERED_MEMBERSHIP = {1: {1, 2, 3}, 2: {1, 2}, 3: {1, 2}, 4: {1, 3}}
STAGGERED_OMEGA = 3

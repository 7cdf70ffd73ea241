"""Shared fixtures and the acceptance-criteria terminal summary.

The acceptance tests in test_acceptance.py are named test_criterion_NN_*;
after the run we print one PASS/FAIL line per criterion so the gate can be
read off the bottom of the log without scrolling through pytest output.
"""

import re

import numpy as np
import pytest

CRITERIA = {
    1: "analytic Jacobians match finite differences on all residual families",
    2: "model-consistent frame is a fixed point of track_frame",
    3: "benchmark orderings (baseline/specular/joint/depth) hold on 3 seeds",
    4: "full-model mean RMS on LF under 1.5% of bbox diagonal",
    5: "template albedo recovery and held-out re-render accuracy",
    6: "tracking degrades gracefully under template noise",
    7: "energy is non-increasing across accepted steps and stages",
    8: "SH basis orthonormality and clamped-cosine irradiance fit",
    9: "benchmark reruns are deterministic",
}

_outcomes = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    num = int(m.group(1))
    if report.when == "call":
        _outcomes[num] = report.outcome
    elif report.when == "setup" and report.outcome != "passed":
        # setup error/skip counts as a non-pass for the criterion
        _outcomes.setdefault(num, report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(CRITERIA):
        outcome = _outcomes.get(num)
        if outcome is None:
            continue
        word = "PASS" if outcome == "passed" else outcome.upper()
        tr.write_line(f"[criterion {num}] {word}: {CRITERIA[num]}")


@pytest.fixture
def rng():
    return np.random.default_rng(20260815)

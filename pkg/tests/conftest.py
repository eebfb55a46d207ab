import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scorecal.data import EmbeddingSet, ScoreSet, TrialList

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_embeddings(rng, n=6, dim=4, prefix="u", domains=None):
    ids = [f"{prefix}{k}" for k in range(n)]
    doms = domains or ["A" if k % 2 else "B" for k in range(n)]
    return EmbeddingSet(ids, rng.normal(size=(n, dim)), rng.uniform(2, 60, n), doms)


def labeled_scores(tar, non, stage="external"):
    return ScoreSet.from_arrays(np.asarray(tar, float), np.asarray(non, float), stage)


def all_pairs(emb: EmbeddingSet, labels=None) -> TrialList:
    pairs = [(a, b) for a in emb.ids for b in emb.ids if a != b]
    labs = labels or [k % 2 for k in range(len(pairs))]
    return TrialList([p[0] for p in pairs], [p[1] for p in pairs], labs)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, with its measured detail."""
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in getattr(rep, "nodeid", "") or rep.when != "call":
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props:
                rows.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL", props.get("detail", "")))
    if rows:
        terminalreporter.section("acceptance criteria")
        for num, status, detail in sorted(rows):
            terminalreporter.write_line(f"[{status}] criterion {num:2d}: {detail}")

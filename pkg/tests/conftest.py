import os
import sys
import time

import pytest

sys.path.insert(0, os.path.dirname(__file__))

import helpers  # noqa: E402
from enap import mining  # noqa: E402
from enap.config import multiphase2d_config  # noqa: E402
from enap.control import em_train  # noqa: E402
from enap.core import pmm_validate  # noqa: E402
from enap.envs import multiphase2d_demos  # noqa: E402

# every machine the miner builds or prunes during the session is checked for these
_INVARIANT_KINDS = {"normalization", "nis_mismatch", "bad_probability", "dangling_edge"}


@pytest.fixture(autouse=True)
def check_produced_machines(monkeypatch):
    produced = []

    def recording(fn):
        def wrapper(*a, **kw):
            out = fn(*a, **kw)
            produced.append(getattr(out, "pmm", out))
            return out
        return wrapper

    monkeypatch.setattr(mining, "build_hypothesis", recording(mining.build_hypothesis))
    monkeypatch.setattr(mining, "stable_phase_prune", recording(mining.stable_phase_prune))
    monkeypatch.setattr(mining, "renumber", recording(mining.renumber))
    yield
    helpers.PRODUCED_COUNT[0] += len(produced)
    for pmm in produced:
        bad = [v for v in pmm_validate(pmm) if v.kind in _INVARIANT_KINDS]
        assert not bad, f"mined machine violates invariants: {bad}"


def pytest_terminal_summary(terminalreporter):
    if not helpers.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(helpers.ACCEPTANCE):
        ok, detail = helpers.ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def mp_demos():
    return multiphase2d_demos(200, seed=0)


@pytest.fixture(scope="session")
def mp_cfg():
    return multiphase2d_config(seed=0)


@pytest.fixture(scope="session")
def mp_k1(mp_demos, mp_cfg):
    """One pipeline pass on the bimodal multiphase demos; shared because it takes ~20 s."""
    return em_train(mp_demos, None, 1, mp_cfg)


@pytest.fixture(scope="session")
def mp_k3(mp_demos, mp_cfg):
    start = time.perf_counter()
    res = em_train(mp_demos, None, 3, mp_cfg)
    res.elapsed = time.perf_counter() - start  # counted in the end-to-end runtime budget
    return res

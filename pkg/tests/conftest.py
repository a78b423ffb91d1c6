import numpy as np
import pytest
import torch
from hypothesis import settings

from molflae.moldata import load_vocabulary
from molflae.training import TrainConfig

settings.register_profile("molflae", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("molflae")


@pytest.fixture(scope="session")
def vocab():
    return load_vocabulary("qm9")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(
        n_latent=4, latent_dim=4, hidden=16, layers=2, heads=2, k=8,
        batch_size=4, max_steps=4, n_steps=50, dtype="float64", seed=3,
    )


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# --------------------------------------------------------------------------- acceptance report

_ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}
ACCEPTANCE_CRITERIA = range(1, 10)


@pytest.fixture
def criterion():
    """Record one acceptance criterion's verdict; the line is repeated in the session summary."""

    def record(num: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.setdefault(num, []).append((ok, detail))
        print(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in str(r.nodeid) for stats in terminalreporter.stats.values() for r in stats if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in ACCEPTANCE_CRITERIA:
        parts = _ACCEPTANCE.get(n)
        if not parts:
            terminalreporter.write_line(f"criterion {n}: FAIL  (not run or did not complete)")
            continue
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}  " + " | ".join(d for _, d in parts))

import kanwm  # noqa: F401  (pins BLAS threads before numpy loads)
import numpy as np
import pytest

from kanwm.core import tensor as T

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_TITLES = {
    1: "oracle equivalence",
    2: "gradient suite",
    3: "spline properties",
    4: "iso-parameter discipline",
    5: "throughput ordering",
    6: "overfit check",
    7: "desk-scale parity",
    8: "reproducibility",
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(passed), detail)
    return record


def fd_check(fn, arrays, eps=1e-4):
    """Analytic vs central-difference gradients of ``fn(dict of Tensors) -> scalar Tensor``."""
    from kanwm.oracle import finite_difference_grad, max_relative_error
    _, analytic = T.value_and_grad(fn, arrays)
    numeric = finite_difference_grad(lambda p: fn(p).item(), arrays, eps=eps)
    return max_relative_error(analytic, numeric)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_TITLES):
        if n not in ACCEPTANCE:
            continue
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(
            f"criterion {n} ({ACCEPTANCE_TITLES[n]}): {'PASS' if passed else 'FAIL'} | {detail}")


def tiny_world_model(perception="mlp", prediction="mlp", latent_mode="probs", **kw):
    from kanwm.worldmodel import RewardBins, make_world_model_config
    opts = dict(obs_shape=(8, 8, 1), action_dim=2, h_dim=6, groups=2, classes=3,
                bins=RewardBins(count=7, low=-3, high=3), encoder_units=3, reward_units=4,
                prior_units=5, latent_mode=latent_mode)
    opts.update(kw)
    return make_world_model_config(perception, prediction, **opts)


def random_batch(rng, cfg, b=2, t=3):
    first = np.zeros((b, t))
    if t > 2:
        first[0, 2] = 1
    return {
        "obs": rng.uniform(0, 1, (b, t) + tuple(cfg.obs_shape)),
        "action": rng.uniform(-1, 1, (b, t, cfg.action_dim)),
        "reward": rng.normal(0, 2, (b, t)),
        "cont": (rng.uniform(size=(b, t)) > 0.2).astype(float),
        "is_first": first,
    }


@pytest.fixture(scope="session")
def smoke_runs(tmp_path_factory):
    """Two independent smoke runs with the same seed, shared across modules."""
    from kanwm.config import smoke_config
    from kanwm.train import train_loop
    cfg = smoke_config()
    dirs = [train_loop(cfg, tmp_path_factory.mktemp(f"smoke{i}")) for i in range(2)]
    return cfg, dirs

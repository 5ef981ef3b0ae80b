import numpy as np
import pytest

from madkd import config, diffcore as dc
from madkd.data import write_csv
from madkd.models import save_checkpoint
from madkd.trainer import fit_teacher

# small enough for a run in a couple of seconds, large enough to hit every cadence
TINY = dict(per_class=60, t_ep=12, t_ldep=[8], ep=3, spe=4, n_s=3, n_g=2, bs=32, ldep=[2],
            save_every=4, probe_every=4, probe_tau=2, sample_every=4, track_every=2,
            s_hidden=[16, 16], g_hidden=[16, 16], t_hidden=[32, 32], d_z=8, d_e=8)


def tiny_cfg(**kw) -> config.DistillConfig:
    return config.resolve({}, {**TINY, **kw})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_teacher(tmp_path_factory):
    """Teacher checkpoint (plus test.csv beside it) for the tiny blobs preset."""
    cfg = tiny_cfg()
    T, _, test, _ = fit_teacher(cfg)
    d = tmp_path_factory.mktemp("teacher")
    save_checkpoint(T, d / "teacher.ckpt")
    write_csv(test, d / "test.csv")
    return d / "teacher.ckpt", test


def param(shape, rng, scale=1.0):
    return dc.Tensor(scale * rng.standard_normal(shape), requires_grad=True)


# one line per acceptance criterion, echoed again at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

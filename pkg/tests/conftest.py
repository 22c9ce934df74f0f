import numpy as np
import pytest
from hypothesis import settings

from trajconsensus.core import AgentClass, AgentTrack

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def make_track(agent_id, kind, t, x, y, vx=None, vy=None, ax=None, ay=None, lane=None, length=None):
    t = np.asarray(t, dtype=float)
    z = np.zeros_like(t)
    x = np.broadcast_to(np.asarray(x, dtype=float), t.shape).copy()
    y = np.broadcast_to(np.asarray(y, dtype=float), t.shape).copy()
    fill = lambda v: z if v is None else np.broadcast_to(np.asarray(v, dtype=float), t.shape).copy()  # noqa: E731
    if lane is not None and isinstance(lane, str):
        lane = np.full(t.shape, lane, dtype=object)
    return AgentTrack(agent_id, kind, t, x, y, fill(vx), fill(vy), fill(ax), fill(ay), lane=lane, length=length)


def cv_track(agent_id, kind, p0, v, n=100, dt=0.1, t0=0.0, lane=None, length=None):
    """Constant-velocity track on the frame grid starting at frame t0/dt."""
    k0 = int(round(t0 / dt))
    t = (k0 + np.arange(n)) * dt
    tau = t - t[0]
    return make_track(agent_id, kind, t, p0[0] + v[0] * tau, p0[1] + v[1] * tau, v[0], v[1],
                      lane=lane, length=length)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":").lstrip("C"))):
            terminalreporter.write_line(line)

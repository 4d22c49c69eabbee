import numpy as np
import pytest

from areaeffect.frames import PopulationFrame


def random_frame(rng, m=3, area_sizes=None, p_ind=2, p_ctx=1, sample_rate=0.4,
                 with_weights=False):
    """A valid random frame: both arms present per area, >=2 sampled per arm."""
    if area_sizes is None:
        area_sizes = rng.integers(12, 30, size=m)
    area = np.repeat(np.arange(1, m + 1), area_sizes)
    n = area.shape[0]
    w_ind = rng.normal(size=(n, p_ind))
    ctx_vals = rng.normal(size=(m, p_ctx))
    w_ctx = ctx_vals[area - 1] if p_ctx else np.empty((n, 0))
    a = np.zeros(n, dtype=int)
    s = np.zeros(n, dtype=int)
    start = 0
    for j, size in enumerate(area_sizes):
        rows = np.arange(start, start + size)
        treated = rng.choice(rows, size=max(2, size // 2), replace=False)
        a[treated] = 1
        for arm in (0, 1):
            pool = rows[a[rows] == arm]
            take = max(2, int(round(sample_rate * pool.size / 2)))
            take = min(take, pool.size)
            s[rng.choice(pool, size=take, replace=False)] = 1
        start += size
    y = np.where(s == 1, rng.normal(size=n) + a, np.nan)
    weight = None
    if with_weights:
        weight = np.where(s == 1, rng.uniform(1, 5, size=n), np.nan)
    return PopulationFrame(area, a, s, y, w_ind, w_ctx, weight=weight)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)

"""Deterministic 5,281-unit admin panel whose criteria outcomes are known.

Six disjoint construction groups each trip exactly one headline criterion
(some additionally trip overlapping ones, which the union semantics absorb):

  weight-one     700  omega = 1                 -> C2
  big-frame      300  frame turnover 2e7        -> C2
  zero-admin     400  one zero admin period     -> C6 (and C4)
  high-impact    500  very large survey values  -> C1
  volatile       200  time-varying omega*y      -> C3
  gap            220  drifting admin-survey gap -> C4, C5

Total survey-reporting 2,320; the 2,961 background units trip nothing.
"""

import numpy as np

from survinfer.adminframe import AdminPanel

N_PERIODS = 9

GROUP_SIZES = {
    "weight_one": 700,
    "big_frame": 300,
    "zero_admin": 400,
    "high_impact": 500,
    "volatile": 200,
    "gap": 220,
    "background": 2961,
}


def build_admin_fixture(seed: int = 0) -> tuple[AdminPanel, dict[str, np.ndarray]]:
    rng = np.random.default_rng(seed)
    n = sum(GROUP_SIZES.values())
    assert n == 5281

    groups: dict[str, np.ndarray] = {}
    start = 0
    for name, size in GROUP_SIZES.items():
        groups[name] = np.arange(start, start + size)
        start += size

    periods = [f"2023-{m:02d}" for m in range(1, N_PERIODS + 1)]
    y_stat = np.empty((n, N_PERIODS))
    base = rng.uniform(50, 150, n)
    y_stat[:] = base[:, None]

    hi = groups["high_impact"]
    y_stat[hi] = rng.uniform(50_000, 60_000, len(hi))[:, None]

    vol = groups["volatile"]
    amp = rng.uniform(0.2, 0.4, len(vol))
    t = np.arange(N_PERIODS)
    y_stat[vol] = base[vol][:, None] * (1 + amp[:, None] * np.sin(t)[None, :])

    y_adm = y_stat.copy()
    gap = groups["gap"]
    drift = rng.uniform(5, 15, len(gap))
    y_adm[gap] = y_stat[gap] + drift[:, None] * (t[None, :] + 1)

    zero = groups["zero_admin"]
    y_adm[zero, 4] = 0.0

    omega = np.full((n, N_PERIODS), 2.0)
    omega[groups["weight_one"]] = 1.0

    frame_turnover = np.full(n, 1e5)
    frame_turnover[groups["big_frame"]] = 2e7

    panel = AdminPanel(
        ids=[f"b{i:05d}" for i in range(n)],
        periods=periods,
        y_adm=y_adm,
        y_stat=y_stat,
        omega=omega,
        domain=np.array(["services"] * n),
        frame_turnover=frame_turnover,
    )
    return panel, groups


def expected_survey_ids(groups: dict[str, np.ndarray]) -> set[int]:
    survey = set()
    for name, idx in groups.items():
        if name != "background":
            survey.update(idx.tolist())
    return survey

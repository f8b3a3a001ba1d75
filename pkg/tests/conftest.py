import numpy as np
import pytest

from fusioncurve.dataset import ArmLabel, FusedDataset, SubjectRecord, TrialIndicator


def synth_records(n_h=40, n_b=20, d=2, J=1, seed=0, horizon=None,
                  single_bridge_arm=False, all_events=False):
    """Small generic fused dataset for unit tests (not the simulation DGP)."""
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n_h):
        x = rng.normal(size=d)
        a = ArmLabel(int(rng.integers(0, 2)))
        s = tuple(rng.normal(size=J) + 0.5 * x[0])
        t = float(rng.exponential(2.0) + 0.05)
        delta = int(rng.integers(1, J + 1)) if all_events \
            else int(rng.integers(0, J + 1))
        recs.append(SubjectRecord(tuple(x), a, TrialIndicator.HISTORICAL, s, t, delta))
    for i in range(n_b):
        x = rng.normal(size=d)
        a = ArmLabel.APPROVED if (single_bridge_arm or rng.random() < 0.5) \
            else ArmLabel.INVESTIGATIONAL
        s = tuple(rng.normal(size=J) + 0.3 * x[0] + 0.4 * int(a == ArmLabel.INVESTIGATIONAL))
        recs.append(SubjectRecord(tuple(x), a, TrialIndicator.BRIDGING, s))
    return recs


@pytest.fixture
def small_ds():
    recs = synth_records(seed=5)
    tmax = max(r.t_obs for r in recs if r.t_obs is not None)
    return FusedDataset(recs, horizon=0.9 * tmax)

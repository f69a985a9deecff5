import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cipca.panel import CharacteristicPanel


def make_panel(X_months, returns=None, mktcap=None, prices=None, char_names=None):
    """Assemble a CharacteristicPanel from per-month characteristic arrays."""
    X_months = [np.asarray(X, dtype=float) for X in X_months]
    T = len(X_months)
    dates = [200001 + 100 * (t // 12) + t % 12 for t in range(T)]
    n_chars = X_months[0].shape[1]
    panel = CharacteristicPanel(
        dates=dates,
        assets=[np.array([f"a{i}" for i in range(X.shape[0])]) for X in X_months],
        X=X_months,
        returns=[np.asarray(returns[t], dtype=float) if returns is not None
                 else np.zeros(X_months[t].shape[0]) for t in range(T)],
        mktcap=[np.asarray(mktcap[t], dtype=float) if mktcap is not None
                else np.ones(X_months[t].shape[0]) for t in range(T)],
        prices=[np.asarray(prices[t], dtype=float) if prices is not None
                else np.full(X_months[t].shape[0], 10.0) for t in range(T)],
        char_names=char_names or [f"c{i}" for i in range(n_chars)],
    )
    return panel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

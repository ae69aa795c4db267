import csv

import numpy as np
import pytest

from helpers import random_dataset
from penmcfm.data import make_dataset
from penmcfm.gmifs import _expanded_arrays, gmifs_fit, gmifs_path_coefficients, write_path_csv
from penmcfm.model import observed_log_likelihood
from penmcfm.simulate import SimulationScenario, simulate


@pytest.fixture(scope="module")
def small_fit():
    truth = simulate(SimulationScenario(n=120, P=10, s=2, v=1.5, block_size=10, P2u=2, seed=3))
    return truth.dataset, gmifs_fit(truth.dataset, epsilon=0.02, max_steps=300)


def test_informative_column_moves_first():
    rng = np.random.default_rng(8)
    n = 300
    Xp = rng.standard_normal((n, 5))
    Zp = rng.standard_normal((n, 5))
    # nearly everyone uncured, no censoring, strong effect of the first latency column
    t = (-np.log(rng.uniform(size=n)) / np.exp(1.5 * Xp[:, 0])) ** 0.5
    ds = make_dataset(t, np.ones(n), Zp=Zp, Xp=Xp)
    res = gmifs_fit(ds, epsilon=0.001, max_steps=5)
    assert res.state.moves[0] == (1, 0, 1)


def test_zero_steps_is_unpenalized_fit(rng):
    ds = random_dataset(rng, n=60)
    res = gmifs_fit(ds, max_steps=0)
    assert res.state.step == 0 and res.selected_step == 0
    assert np.all(res.params.b_p == 0) and np.all(res.params.beta_p == 0)
    assert res.state.stop_reason == "max_steps reached"


def test_expanded_coordinates_monotone(small_fit):
    _, res = small_fit
    e = _expanded_arrays(res.state)
    assert np.all(np.diff(e, axis=0) >= 0)
    assert np.all(e >= 0)


def test_cycle_loglik_non_decreasing(small_fit):
    _, res = small_fit
    assert np.all(np.diff(res.state.cycle_loglik) >= -1e-10)


def test_path_coefficients_single_updates(small_fit):
    _, res = small_fit
    st = res.state
    b0, beta0 = gmifs_path_coefficients(st, 0)
    assert np.all(b0 == 0) and np.all(beta0 == 0)
    e = _expanded_arrays(st)
    for s in range(st.step):
        diff = e[s + 1] - e[s]
        assert np.count_nonzero(diff) == 1
        assert diff.max() == pytest.approx(st.epsilon, rel=1e-12)
        b, beta = gmifs_path_coefficients(st, s)
        assert np.abs(b).sum() + np.abs(beta).sum() <= st.epsilon * s + 1e-12
    with pytest.raises(ValueError):
        gmifs_path_coefficients(st, st.step + 1)


def test_selected_model_minimizes_aic(small_fit):
    ds, res = small_fit
    assert res.selected_step == int(np.argmin(res.aic))
    ll = observed_log_likelihood(res.params, ds)
    assert ll == pytest.approx(res.state.loglik_trace[res.selected_step], rel=1e-10)


def test_no_frailty_mode(rng):
    ds = random_dataset(rng, n=60)
    res = gmifs_fit(ds, epsilon=0.05, max_steps=20, frailty_enabled=False)
    assert not res.params.frailty_enabled
    assert res.state.n_unpenalized() == 2 + 2 + 1 + 2


def test_rejects_bad_epsilon(rng):
    with pytest.raises(ValueError):
        gmifs_fit(random_dataset(rng), epsilon=0.0)


def test_path_csv_layout(small_fit, tmp_path):
    _, res = small_fit
    write_path_csv(res, tmp_path / "path.csv")
    with open(tmp_path / "path.csv") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    assert head[:3] == ["step", "loglik", "aic"]
    assert head[3] == "b_p+:b_p[0]"
    assert len(rows) == res.state.step + 2
    assert len(head) == 3 + 2 * 20 + 20

import math

import numpy as np
import pytest

from selftransfer.data import Dataset, GenSpec, generate, load
from selftransfer.errors import ConfigError, DivergenceError, InputError
from selftransfer.layers import Param, one_hot
from selftransfer.network import AlphaSchedule, STLNet, desk_config, init_params
from selftransfer.rng import Rng
from selftransfer.trainer import (
    LOG_FIELDS, TrainConfig, build_net, lr_at, read_log_csv, sgd_step, split_dataset, train,
    train_step, write_log_csv,
)

TINY = desk_config(input_size=(16, 16), hidden=8, channels=(3, 4, 4))


def tiny_dataset(n=24, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.random((n, 1, 16, 16)).astype(np.float32) * 0.2
    images[labels == 1, 0, 4:9, 4:9] += 0.7
    return Dataset(images, labels, [f"s{i}" for i in range(n)])


# -- split ----------------------------------------------------------------

def test_split_sizes_and_determinism():
    labels = np.array([0] * 5 + [1] * 5)
    tr, va = split_dataset(labels, 0.8, Rng(1))
    assert len(tr) == 8 and len(va) == 2 and not set(tr) & set(va)
    tr2, va2 = split_dataset(labels, 0.8, Rng(1))
    assert tr.tolist() == tr2.tolist() and va.tolist() == va2.tolist()


def test_split_stratified_counts():
    labels = np.array([0] * 600 + [1] * 400)
    tr, va = split_dataset(labels, 0.8, Rng(2))
    assert (labels[tr] == 0).sum() == 480 and (labels[tr] == 1).sum() == 320
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(1000))


def test_split_rejects_singleton_class():
    with pytest.raises(InputError):
        split_dataset(np.array([0, 0, 0, 1]), 0.8, Rng(0))


# -- sgd ------------------------------------------------------------------

def param(w, g):
    p = Param("w", np.array(w, dtype=np.float64))
    p.grad[...] = g
    return p


def test_sgd_plain_and_zero_gradient():
    p = param([1.0, -2.0], [0.5, 1.0])
    sgd_step([p], 0.1, 0.0, 0.0)
    np.testing.assert_allclose(p.value, [0.95, -2.1])
    q = param([3.0], [0.0])
    sgd_step([q], 0.1, 0.9, 0.0)
    assert q.value[0] == 3.0


def test_sgd_momentum_recurrence():
    p = param([0.0], [1.0])
    sgd_step([p], 0.1, 0.9, 0.0)
    sgd_step([p], 0.1, 0.9, 0.0)
    assert p.value[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_rejects_non_finite():
    p = param([0.0], [np.nan])
    p.name = "fc2.weight"
    with pytest.raises(DivergenceError, match="fc2.weight"):
        sgd_step([p], 0.1, 0.9, 0.0)


# -- schedules ------------------------------------------------------------

def test_lr_schedule():
    c = TrainConfig()
    assert (lr_at(c, 0), lr_at(c, 29), lr_at(c, 30), lr_at(c, 90)) == (0.01, 0.01, 0.005, 0.00125)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(base_lr=-1)
    with pytest.raises(ConfigError):
        TrainConfig(init_scheme="orthogonal")


# -- single steps ---------------------------------------------------------

def test_alpha_zero_step_matches_classifier_only_network():
    x = np.random.default_rng(3).random((6, 1, 16, 16)).astype(np.float32)
    t = one_hot([0, 1, 0, 1, 1, 0], 2, np.float32)
    both = init_params(STLNet(TINY), Rng(4), scheme="fan_in")
    single = STLNet(TINY.without_localizer())
    single.load_state_dict(both.state_dict(), strict=False)
    both.set_dropout_rng(Rng(9))
    single.set_dropout_rng(Rng(9))
    loc_before = both.param_map["loc.weight"].value.copy()
    train_step(both, x, t, 0.0, 0.01, 0.9, 5e-4)
    train_step(single, x, t, 0.0, 0.01, 0.9, 5e-4)
    for p in single.params:
        assert p.value.tobytes() == both.param_map[p.name].value.tobytes(), p.name
    # only weight decay moves the idle localizer
    np.testing.assert_allclose(both.param_map["loc.weight"].value,
                               loc_before - np.float32(0.01 * 5e-4) * loc_before, rtol=1e-6)


def test_alpha_one_step_matches_localizer_only_network():
    x = np.random.default_rng(5).random((6, 1, 16, 16)).astype(np.float32)
    t = one_hot([0, 1, 0, 1, 1, 0], 2, np.float32)
    both = init_params(STLNet(TINY), Rng(6), scheme="fan_in")
    single = STLNet(TINY.without_classifier())
    single.load_state_dict(both.state_dict(), strict=False)
    both.set_dropout_rng(Rng(1))
    fc_before = {n: p.value.copy() for n, p in both.param_map.items() if n.startswith("fc")}
    train_step(both, x, t, 1.0, 0.01, 0.9, 0.0)
    train_step(single, x, t, 1.0, 0.01, 0.9, 0.0)
    for p in single.params:
        assert p.value.tobytes() == both.param_map[p.name].value.tobytes(), p.name
    for name, before in fc_before.items():
        assert both.param_map[name].value.tobytes() == before.tobytes()


# -- training loop --------------------------------------------------------

def test_zero_epochs_returns_initial_params():
    ds = tiny_dataset()
    cfg = TrainConfig(epochs=0, seed=3)
    res = train(TINY, cfg, ds)
    assert res.log == [] and res.best.epoch == -1
    ref = build_net(TINY, cfg)
    for p in ref.params:
        assert res.best.params[p.name].tobytes() == p.value.tobytes()


def test_training_is_deterministic_and_logs_schedules(tmp_path):
    ds = tiny_dataset()
    cfg = TrainConfig(epochs=4, batch_size=8, lr_halving_period=2,
                      alpha_schedule=AlphaSchedule(0.1, 0.9, 2), seed=11)
    a, b = train(TINY, cfg, ds), train(TINY, cfg, ds)
    for name, v in a.best.params.items():
        assert v.tobytes() == b.best.params[name].tobytes()
    assert [r.alpha for r in a.log] == [0.1, 0.1, 0.9, 0.9]
    assert [r.lr for r in a.log] == [0.01, 0.01, 0.005, 0.005]
    write_log_csv(a.log, tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == ",".join(LOG_FIELDS)
    assert read_log_csv(tmp_path / "log.csv") == a.log
    # the best checkpoint comes from the localizer phase and carries its maximum
    phase = [r.val_acc_loc for r in a.log if r.alpha >= 0.5]
    assert a.best.epoch >= 2 and a.best.val_accuracy == max(phase)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_stops_with_last_good_checkpoint():
    ds = tiny_dataset()
    res = train(TINY, TrainConfig(epochs=3, base_lr=1e30, batch_size=8, seed=1), ds)
    assert res.diverged and "epoch" in res.message
    assert all(np.all(np.isfinite(v)) for v in res.best.params.values())


def test_input_size_mismatch():
    with pytest.raises(ConfigError):
        train(desk_config(), TrainConfig(epochs=1), tiny_dataset())


def test_separable_set_reaches_high_train_accuracy(tmp_path):
    spec = GenSpec(n_samples=200, distractor_count=(0, 0), target_shape="blob",
                   target_intensity=(0.8, 0.9), seed=5)
    generate(spec, tmp_path)
    res = train(desk_config(), TrainConfig(epochs=30), load(tmp_path / "manifest.tsv"))
    assert res.log[-1].train_acc >= 0.95

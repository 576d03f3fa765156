import csv

import numpy as np
import pytest

from ihalab import autodiff as ad
from ihalab import tasks as T
from ihalab import trainer as TR
from ihalab.errors import ConstraintError, NonFiniteError

TINY = {"train": 24, "val": 8, "test": 8}


@pytest.fixture(scope="module")
def tiny_data():
    spec = T.DatasetSpec(task="binary", m_min=3, m_max=4, counts=TINY, seed=5)
    return spec, T.load_or_generate(spec)


def small_cfg(kind, P=2):
    return TR.ModelConfig(kind, heads=2, pseudo=P if kind == "iha" else 1, d=2, positions=4)


def test_param_gap_is_4H2P():
    for H, P in [(8, 2), (8, 8), (2, 3)]:
        mha = TR.count_params(TR.init_params(TR.ModelConfig("mha", heads=H), 0))
        iha = TR.count_params(TR.init_params(TR.ModelConfig("iha", heads=H, pseudo=P), 0))
        assert iha - mha == 4 * H * H * P


def test_config_rejects_hard_mode_and_depth():
    with pytest.raises(ConstraintError):
        TR.ModelConfig("mha", score_mode="hard")
    with pytest.raises(ConstraintError):
        TR.ModelConfig("mha", layers=2)


@pytest.mark.parametrize("kind", ["mha", "iha"])
def test_gradcheck_models(kind):
    batch = T.pad_batch([T.make_example(T.DatasetSpec(m_min=2, m_max=3, seed=s), "train", 0) for s in range(2)])
    rep = TR.model_gradcheck(small_cfg(kind), batch, seed=1)
    assert rep.passed, rep.errors


@pytest.mark.parametrize("kind", ["mha", "iha"])
def test_padding_does_not_change_loss_or_grads(kind):
    exs = [T.make_example(T.DatasetSpec(m_min=2, m_max=3, seed=s), "train", 0) for s in range(3)]
    cfg = small_cfg(kind)
    params = TR.init_params(cfg, 0)

    def run(batch):
        vs = TR._wrap(params)
        loss = TR.loss_fn(TR.forward(vs, batch, cfg), batch, cfg)
        return float(loss.value), ad.backward(loss)

    l1, g1 = run(T.pad_batch(exs))
    l2, g2 = run(T.pad_batch(exs, to_length=2 * max(len(e) for e in exs)))
    assert abs(l1 - l2) <= 1e-12
    for k in g1:
        assert np.abs(g1[k] - g2[k]).max() <= 1e-12


def test_lr_zero_keeps_params(tiny_data):
    _, data = tiny_data
    cfg = small_cfg("iha")
    res, params = TR.train(cfg, data, lr=0.0, max_epochs=3, patience=5, batch=8)
    init = TR.init_params(cfg, 0)
    for k in init:
        np.testing.assert_array_equal(params[k], init[k])
    assert len({c["val_loss"] for c in res.curves}) == 1


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_training_is_bit_reproducible(tiny_data, optimizer):
    _, data = tiny_data
    cfg = small_cfg("iha")
    a, pa = TR.train(cfg, data, 1e-2, max_epochs=3, batch=8, seed=3, optimizer=optimizer)
    b, pb = TR.train(cfg, data, 1e-2, max_epochs=3, batch=8, seed=3, optimizer=optimizer)
    assert a.to_dict() == b.to_dict()
    for k in pa:
        np.testing.assert_array_equal(pa[k], pb[k])


def test_early_stopping_restores_best(tiny_data):
    _, data = tiny_data
    res, _ = TR.train(small_cfg("mha"), data, 0.0, max_epochs=20, patience=2, batch=8)
    assert res.epochs_run == 3 and res.best_epoch == 1


def test_nonfinite_loss_aborts(tiny_data):
    _, data = tiny_data
    with pytest.raises(NonFiniteError, match="epoch 1, batch"):
        TR.train(small_cfg("mha"), data, 1e300, max_epochs=2, batch=8)


def test_evaluate_constant_and_oracle():
    spec = T.preset_spec("ternary", seed=2)
    exs = list(T.gen_split(spec, "test", 200))
    cfg = TR.ModelConfig("mha", positions=spec.m_max)
    params = TR.init_params(cfg, 0)
    params["W_2"][:] = 0.0
    params["b_2"][:] = 0.0
    assert abs(TR.evaluate(params, exs, cfg) - 0.5) <= 0.05
    b = T.pad_batch(exs[:10])
    assert TR._correct(2.0 * b.targets - 1.0, b, cfg) == (b.valid_mask.sum(), b.valid_mask.sum())


def test_empty_batch_skipped():
    cfg = small_cfg("mha")
    empty = T.TaskExample([1, 0], [1, 0], [False, False], {"m": 1})
    loss, acc = TR.evaluate_batches(TR.init_params(cfg, 0), [T.pad_batch([empty])], cfg)
    assert np.isnan(loss) and np.isnan(acc)


def test_cpm3_regression_head():
    spec = T.DatasetSpec(task="cpm3", n_max=4, counts={"train": 16, "val": 4, "test": 4})
    data = T.load_or_generate(spec)
    cfg = TR.model_for_task(spec, "iha", heads=2, d=2)
    res, _ = TR.train(cfg, data, 1e-3, max_epochs=2, batch=8, optimizer="adam")
    assert res.epochs_run == 2 and 0.0 <= res.test_accuracy <= 1.0


def test_sweep_rows_and_resume(tmp_path, tiny_data):
    spec, _ = tiny_data
    path = tmp_path / "sweep.csv"
    rows = TR.sweep(spec, path, lrs=(1e-3, 1e-4), max_epochs=1, batch=8)
    assert [(r["kind"], float(r["lr"])) for r in rows] == [("mha", 1e-3), ("mha", 1e-4), ("iha", 1e-3), ("iha", 1e-4)]
    # drop one cell and mark another so we can see it was reused, not retrained
    with open(path) as fh:
        kept = list(csv.DictReader(fh))[:3]
    kept[0]["test_accuracy"] = "0.123"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TR.SWEEP_FIELDS)
        w.writeheader()
        w.writerows(kept)
    again = TR.sweep(spec, path, lrs=(1e-3, 1e-4), max_epochs=1, batch=8)
    assert len(again) == 4 and again[0]["test_accuracy"] == "0.123"
    assert again[3]["test_accuracy"] == rows[3]["test_accuracy"]


def test_save_result_files(tmp_path, tiny_data):
    _, data = tiny_data
    res, _ = TR.train(small_cfg("mha"), data, 1e-3, max_epochs=1, batch=8)
    paths = TR.save_result(res, tmp_path)
    assert "wall_seconds" not in paths["result"].read_text()
    assert paths["curves"].read_text().splitlines()[0] == "epoch,split,loss,acc"

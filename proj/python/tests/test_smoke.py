import itertools
import math

import numpy as np
import pytest

import aatn


def test_sinkhorn_marginals_and_cost():
    rng = np.random.default_rng(0)
    cost = rng.uniform(size=(4, 4))
    res = aatn.sinkhorn(cost, epsilon=1e-3, max_iters=2_000_000)
    plan = res["plan"]
    assert res["converged"]
    assert np.allclose(plan.sum(axis=0), 0.25, atol=1e-6)
    assert np.allclose(plan.sum(axis=1), 0.25, atol=1e-6)
    best = min(sum(cost[i, p[i]] for i in range(4)) for p in itertools.permutations(range(4)))
    assert (cost * plan).sum() <= 1.01 * best / 4


def test_sinkhorn_rejects_bad_input():
    with pytest.raises(aatn.NumericError):
        aatn.sinkhorn(np.array([[0.0, np.nan], [1.0, 0.0]]))
    with pytest.raises(ValueError):
        aatn.sinkhorn(np.zeros(3))


def test_mmd_closed_form():
    assert round(aatn.mmd_gaussian(np.array([[0.0]]), np.array([[2.0]])), 4) == 1.7293
    x = np.random.default_rng(1).normal(size=(10, 3))
    assert aatn.mmd_gaussian(x, x) < 1e-7


def test_ece_and_accuracy():
    assert round(aatn.ece([0.95, 0.95, 0.55, 0.55], [1, 0, 1, 1], [1, 0, 1, 0]), 4) == 0.05
    assert aatn.accuracy([1, 0, 1], [1, 1, 1]) == pytest.approx(2 / 3)
    with pytest.raises(aatn.ContractError):
        aatn.accuracy([], [])


def test_pair_matching_labels():
    tokens, labels = aatn.gen_pair_matching(seed=3, n=200, width=8, vocab=20)
    assert sum(labels) == 100
    for t, y in zip(tokens, labels):
        assert len(t) == 8
        assert y == int(len(set(t)) < len(t))
    with pytest.raises(aatn.ConfigError):
        aatn.gen_pair_matching(seed=0, n=10, width=3, vocab=20)


def test_attention_weights_rows_and_mask():
    q = np.zeros((1, 1, 2, 1))
    q[0, 0, :, 0] = [math.log(2.0), 0.0]
    k = np.zeros((1, 1, 2, 1))
    k[0, 0, 0, 0] = 1.0
    w = aatn.attention_weights(q, k)
    assert w[0, 0, 0] == pytest.approx([2 / 3, 1 / 3])
    masked = aatn.attention_weights(q, k, mask=[[1, 0]])
    assert masked[0, 0, :, 1] == pytest.approx([0.0, 0.0])
    assert masked.sum(axis=-1) == pytest.approx(np.ones((1, 1, 2)))


def test_train_small_run(tmp_path):
    config = {
        "model": {"vocab_size": 12, "d_model": 8, "H": 2, "n_layers": 1, "w_max": 6, "d_ff": 16,
                  "align": {"method": "ct"}},
        "train": {"epochs": 1, "batch_size": 16, "mmd_tokens": 32},
        "data": {"n_train": 64, "n_val": 32, "width": 6},
    }
    report = aatn.train(config, checkpoint=str(tmp_path / "ckpt.aatn"))
    assert len(report["steps"]) == 4
    assert report["config"]["model"]["align"]["method"] == "ct"
    assert (tmp_path / "ckpt.aatn").exists()
    for step in report["steps"]:
        assert math.isfinite(step["J"])
    again = aatn.train(config)
    assert [s["J"] for s in again["steps"]] == [s["J"] for s in report["steps"]]


def test_cli_exit_codes():
    code, _, err = aatn.run_cli(["train"])
    assert code == 2 and "--config" in err
    code, out, _ = aatn.run_cli(["--help"])
    assert code == 0 and "gradcheck" in out

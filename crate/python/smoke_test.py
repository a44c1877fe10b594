"""Smoke test for the Python extension.

    pip install --no-build-isolation -e crates/py
    python3 python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import numpy as np

import wpgrec


def check_transforms():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 3))
    subbands = wpgrec.swpt(x.tolist(), "haar", 2, "periodic")
    assert len(subbands) == 4
    energy = sum(np.square(np.asarray(z)).sum() for z in subbands)
    assert abs(energy - 4 * np.square(x).sum()) < 1e-9 * energy

    # Circular shifts of the input shift every subband the same way.
    shifted = wpgrec.swpt(np.roll(x, 3, axis=0).tolist(), "haar", 2, "periodic")
    for a, b in zip(subbands, shifted):
        assert np.allclose(np.roll(np.asarray(a), 3, axis=0), b, atol=1e-12)

    low, high = wpgrec.filter_bank("sym4")
    assert abs(sum(low) - math.sqrt(2)) < 1e-10 and abs(sum(high)) < 1e-10

    impulse = [[1.0]] + [[0.0]] * 63
    assert abs(wpgrec.spectral_flatness(impulse) - 1.0) < 1e-9
    assert wpgrec.spectral_flatness([[2.0]] * 64) < 1e-6

    v = rng.standard_normal(20)
    assert np.allclose(wpgrec.power_spectrum(v.tolist()), np.abs(np.fft.fft(v)) ** 2)


def check_graph():
    edges = [(0, 0), (0, 1), (1, 1)]
    rng = np.random.default_rng(1)
    h0 = rng.standard_normal((4, 2))
    thetas = [[rng.standard_normal((2, 2)) for _ in range(3)]]
    out = np.asarray(wpgrec.cheby_propagate(edges, 2, 2, h0.tolist(), [[t.tolist() for t in thetas[0]]]))

    a = np.zeros((4, 4))
    for u, i in edges:
        a[u, 2 + i] = a[2 + i, u] = 1.0
    dinv = 1 / np.sqrt(a.sum(1))
    lap = -dinv[:, None] * a * dinv[None, :]
    polys = [np.eye(4), lap, 2 * lap @ lap - np.eye(4)]
    expected = sum(p @ h0 @ t for p, t in zip(polys, thetas[0]))
    assert np.allclose(out, expected, atol=1e-10)


def check_metrics():
    assert wpgrec.rank_target([0.1, 0.9, 0.5], 3) == 1
    assert wpgrec.rank_target([0.1, 0.9, 0.5], 3, excluded=[2]) == 0
    hr, ndcg = wpgrec.ranking_metrics([9], 10)
    assert hr == 1.0 and abs(ndcg - 1 / math.log2(11)) < 1e-9


def check_training():
    worst = wpgrec.gradcheck()
    assert all(e is None or e < 1e-4 for e in worst.values()), worst

    ds = wpgrec.Dataset.synthetic("planted", seed=7)
    assert ds.num_users == 400
    cfg = wpgrec.Config("train.max_epochs = 8\nmodel.max_len = 14\n")
    cfg.set("train.patience", "3")
    assert cfg.get("train.patience") == "3"

    model = wpgrec.Trained.fit(ds, cfg, seed=42)
    test = model.evaluate(ds, "test")
    pop = ds.popularity("test")
    print(f"planted test HR@10 {test['HR@10']:.4f}, popularity {pop['HR@10']:.4f}")
    assert test["HR@10"] > pop["HR@10"]

    energy, sfm, gates = model.subbands(ds)
    assert np.allclose(np.asarray(gates).sum(1), 1.0)
    scores = np.asarray(model.scores(ds))
    assert scores.shape == (ds.num_users, ds.num_items)

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ckpt.bin"
        model.save(str(path))
        again = wpgrec.Trained.load(str(path), ds)
        assert again.evaluate(ds, "test") == test
        ds.save(str(Path(tmp) / "data"))
        assert wpgrec.Dataset.load(str(Path(tmp) / "data")).stats() == ds.stats()

    try:
        wpgrec.Config("bogus.key = 1")
    except ValueError as e:
        assert "bogus.key" in str(e)
    else:
        raise AssertionError("unknown key accepted")


if __name__ == "__main__":
    check_transforms()
    check_graph()
    check_metrics()
    check_training()
    print("python smoke test passed")

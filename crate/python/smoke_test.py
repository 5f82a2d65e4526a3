"""Smoke test for the lum_py extension: train, query, round-trip, metrics."""

import math
import tempfile
from pathlib import Path

import lum_py


def main():
    corpus = lum_py.Corpus.synthetic(num_users=60, num_items=80, seed=1)
    history, held_out = corpus.split(2)
    assert history.num_events + held_out.num_events == corpus.num_events

    model, losses = lum_py.LumModel.train(history, epochs=2, seed=0)
    assert all(math.isfinite(x) for x in losses)
    print(f"{corpus!r}: {model.num_parameters} parameters, losses {losses}")

    user = history.users()[0]
    results = model.query(history, user, [1, 2], k=5)
    assert len(results) == 2
    for o, top in results:
        assert len(o) == model.model_dim and len(top) == 5
    recall = model.recall(history, held_out, k=10)
    assert 0.0 <= recall <= 1.0

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "lum.ckpt"
        version = model.save(str(path))
        assert version == model.version
        again = lum_py.LumModel.load(str(path))
        assert again.query(history, user, [1, 2], k=5) == results
        try:
            lum_py.LumModel.load(str(Path(d) / "missing.ckpt"))
        except FileNotFoundError as e:
            assert "train-lum" in str(e)
        else:
            raise AssertionError("missing checkpoint loaded")

    assert lum_py.auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == 0.75
    assert lum_py.recall_at_k([4, 9, 1], {9, 7}, 2) == 0.5
    a, b, r2 = lum_py.fit_scaling_law([1e8, 1e9, 1e10], [0.0068 * math.log(x) + 0.1741 for x in (1e8, 1e9, 1e10)])
    assert abs(a - 0.0068) < 1e-9 and abs(b - 0.1741) < 1e-9 and abs(r2 - 1) < 1e-9
    worked = lum_py.nce_loss([[1.0, 0.0]], [[1.0, 0.0]], [[[0.0, 1.0], [0.0, -1.0]]], 1.0)
    assert abs(worked - math.log(1 + 2 * math.exp(-1))) < 1e-12
    assert abs(lum_py.interest_matching([1.0, 2.0], [2.0, 4.0]) - 1.0) < 1e-6
    try:
        lum_py.auc([0.1, 0.2], [1, 1])
    except ValueError:
        pass
    else:
        raise AssertionError("single-class AUC accepted")
    print(f"version {version}, recall@10 {recall:.3f}: ok")


if __name__ == "__main__":
    main()

"""Smoke test for the cpsearch extension module.

Build first (see README), then run: python python/smoke_test.py
"""

import random

import cpsearch


def gaussian(n, seed):
    rng = random.Random(seed)
    x = [[rng.uniform(-1, 1) for _ in range(3)] for _ in range(n)]
    y = [row[0] + 0.5 * row[1] + rng.gauss(0, 1) for row in x]
    return x, y


def main():
    assert "CQR-RF" in cpsearch.presets()
    spec = cpsearch.PipelineSpec.preset("scp-ridge")
    assert spec.estimator == "mean_residual"
    assert cpsearch.PipelineSpec.from_json(spec.to_json()) == spec

    x, y = gaussian(600, 0)
    xt, yt = gaussian(2000, 1)
    pred = cpsearch.IntervalPredictor.fit(spec, x, y, alpha=0.1, seed=3)
    intervals = pred.predict(xt)
    coverage = sum(lo <= v <= hi for (lo, hi), v in zip(intervals, yt)) / len(yt)
    assert 0.85 < coverage < 0.95, coverage

    config = """
[space]
models = ["ridge", "forest"]
[space.ranges.forest]
n_trees = [10, 30]
[budget]
n_init = 2
j_folds = 2
"""
    best, fitted, history = cpsearch.search(x, y, alpha=0.1, config=config, n_iter=2, seed=1)
    assert len(history) == 6
    assert min(h[1] for h in history if not h[2]) == min(h[1] for h in history if h[0] == best)
    assert len(fitted.predict(xt[:5])) == 5

    lo, hi, flagged = cpsearch.combine_cate((0.0, 1.0), (2.0, 4.0))
    assert (lo, hi, flagged) == (1.0, 4.0, False)

    cov, _, length, _ = cpsearch.benchmark("synthetic:gaussian:300", "SCP-Ridge", splits=3)
    assert 0.0 <= cov <= 1.0 and length > 0.0

    try:
        cpsearch.PipelineSpec.preset("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")
    print("cpsearch smoke test passed:", best, f"coverage={coverage:.3f}")


if __name__ == "__main__":
    main()

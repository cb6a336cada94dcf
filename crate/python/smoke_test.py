"""Smoke test for the dsamp Python bindings.

Build and install the extension first, e.g.

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/dsamp-*.whl

then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import dsamp


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    assert "gmm25" in dsamp.energies() and "funnel-hard" in dsamp.energies()
    assert len(dsamp.methods()) == 8

    times = dsamp.schedule("harmonic", 3)
    assert all(close(a, b, 1e-12) for a, b in zip(times, [0.0, 6 / 11, 9 / 11, 1.0])), times
    assert dsamp.schedule("uniform", 4) == [0.0, 0.25, 0.5, 0.75, 1.0]

    e = dsamp.Energy("gmm25")
    assert e.dim == 2 and e.log_partition() == 0.0
    xs = e.sample(256, 0)
    assert len(xs) == 256 and all(len(x) == 2 for x in xs)
    assert all(math.isfinite(v) for v in e.energy(xs))
    g = e.grad([[0.1, -0.2]])
    h = 1e-6
    fd = (e.energy([[0.1 + h, -0.2]])[0] - e.energy([[0.1 - h, -0.2]])[0]) / (2 * h)
    assert close(g[0][0], fd, 1e-5 * max(1.0, abs(fd))), (g, fd)
    assert dsamp.wasserstein2(xs, xs) == 0.0
    assert dsamp.wasserstein2([[0.0], [1.0]], [[1.0], [3.0]]) > 0.0

    try:
        dsamp.Energy("no-such-energy")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown energy accepted")

    cfg = dsamp.TrainConfig.preset("gmm25", 3, "tb-both")
    cfg.set("iterations=20", "batch_size=64", "eval_interval=10", "eval_samples=128", "eval_w2=false")
    cfg.set("net.hidden=16", "net.s_dim=16", "net.t_dim=16")
    cfg.validate()
    assert cfg.iterations == 20 and cfg.method == "tb-both"
    assert dsamp.TrainConfig.from_toml(cfg.to_toml()).to_dict() == cfg.to_dict()

    bad = dsamp.TrainConfig.preset("gmm25", 3, "pis-fixed")
    bad.set("destr_loss=tb")
    try:
        bad.validate()
    except ValueError as err:
        assert "Table 1" in str(err)
    else:
        raise AssertionError("revkl + tb accepted")

    untrained = dsamp.Sampler(cfg)
    assert untrained.log_z == 0.0
    report = untrained.evaluate(512, 0, False)
    assert report["elbo"] < report["eubo"] and report["w2"] is None

    seen = []
    sampler, result = dsamp.train(cfg, seen.append)
    assert result["status"] == "ok", result
    assert [r["iter"] for r in result["records"]] == [10, 20] == [r["iter"] for r in seen]
    assert result["final_metrics"]["n_samples"] == 128
    assert sampler.log_z != 0.0

    samples = sampler.sample(100, 3)
    assert len(samples) == 100 and samples == sampler.sample(100, 3)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.dsamp")
        sampler.save(path)
        loaded = dsamp.Sampler.load(path)
        assert loaded.sample(100, 3) == samples
        assert loaded.evaluate(256, 1, True) == sampler.evaluate(256, 1, True)
        assert loaded.config.to_dict() == sampler.config.to_dict()

    print("python smoke test passed")


if __name__ == "__main__":
    main()

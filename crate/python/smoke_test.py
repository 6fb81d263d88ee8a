"""Smoke test for the physs extension module."""

import math
import pathlib

import physs

ROOT = pathlib.Path(__file__).resolve().parent.parent


def check_kernel():
    k = physs.Kernel("matern52", lengthscale=0.7, variance=1.3)
    assert abs(k(0.2, 0.2) - 1.3) < 1e-12
    h = 1e-5
    fd = (k(0.3 + h, -0.1) - k(0.3 - h, -0.1)) / (2 * h)
    assert abs(fd - k.derivative(0.3, -0.1, 1, 0)) < 1e-6
    assert k.max_derivative_order == 2


def check_smoother():
    k = physs.Kernel("matern32", lengthscale=1.0, variance=1.0)
    t = [0.1 * i for i in range(50)]
    y = [math.sin(v) for v in t]
    mean, var, logml = physs.smooth_series(k, t, y, 1e-2)
    assert len(mean) == 50 and all(v > 0 for v in var)
    assert max(abs(m - v) for m, v in zip(mean, y)) < 0.1
    assert math.isfinite(logml)


def check_experiment():
    train, test = physs.simulate("monotonic", seed=0)
    assert train.output_names == ["y"] and len(test.times) > 0
    text = (ROOT / "configs" / "monotonic.toml").read_text()
    exp = physs.Experiment.from_toml(text)
    exp.epochs = 20
    report = exp.fit()
    assert report["epochs"] == 20
    assert report["rmse"] < 0.3, report
    mean, std = exp.predict([1.0, 5.0, 9.0], [[], [], []])
    assert mean[0][0] < mean[1][0] < mean[2][0]
    assert all(s[0] > 0 for s in std)
    m = physs.metrics([0.0, 1.0], [1.0, 1.0], [0.0, 1.0])
    assert m["rmse"] == 0.0


if __name__ == "__main__":
    check_kernel()
    check_smoother()
    check_experiment()
    print("python smoke test passed")

import numpy as np
import pytest

from clusterfl import nn


def random_instance(seed, input_dim=3, hidden=(4, 4), num_classes=2, batch=5, scale=1.0):
    rng = np.random.default_rng(seed)
    cfg = nn.MlpConfig(input_dim, hidden, num_classes)
    params = scale * rng.standard_normal(cfg.num_params)
    x = rng.standard_normal((batch, input_dim))
    y = rng.integers(0, num_classes, size=batch)
    return cfg, params, nn.Batch(x, y)


def central_differences(f, params, step=1e-5):
    grad = np.empty_like(params)
    for i in range(params.size):
        up = params.copy()
        down = params.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (f(up) - f(down)) / (2 * step)
    return grad


def relative_errors(analytic, numeric, floor=1e-6):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class LinearModel:
    """y ~ w0 * x + w1 with summed squared error; the engine's model interface in two parameters."""

    num_params = 2

    def loss_and_gradients(self, models, features, labels):
        models = np.asarray(models, dtype=float)
        x = np.asarray(features, dtype=float)[..., 0]
        y = np.asarray(labels, dtype=float)
        resid = models[None, :, 0, None] * x[:, None, :] + models[None, :, 1, None] - y[:, None, :]
        losses = (resid ** 2).sum(axis=-1)
        grads = np.stack([(2 * resid * x[:, None, :]).sum(axis=-1), (2 * resid).sum(axis=-1)], axis=-1)
        return losses, grads


def linear_device_data(values, targets, test=None):
    from clusterfl.data import DeviceDataset
    x = np.asarray(values, dtype=float)[:, None]
    y = np.asarray(targets)
    tx, ty = (x, y) if test is None else test
    return DeviceDataset(x, y, tx, ty, 0)


ACCEPTANCE_LINES: list[str] = []


def report(criterion, passed, detail=""):
    """Record a verdict for the end-of-run acceptance summary; returns ``passed``."""
    line = f"{criterion} {'PASS' if passed else 'FAIL'}" + (f"  {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)

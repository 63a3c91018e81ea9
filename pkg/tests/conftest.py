import numpy as np
import pytest

from bvocsr.raster import GeoExtent, RasterGrid, RasterKind


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_grid(data, cell=0.1, lon0=0.0, lat0=40.0, kind=RasterKind.EMISSION, date=None):
    data = np.asarray(data, dtype=np.float64)
    ny, nx = data.shape
    ext = GeoExtent(lon0, round(lon0 + nx * cell, 9), lat0, round(lat0 + ny * cell, 9), cell)
    return RasterGrid(ext, data, kind, date)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    from bvocsr.toy import make_toy

    d = tmp_path_factory.mktemp("toy")
    make_toy(d)
    return d


def gradient_check(model, x, y, rng, n_coords=10, eps=1e-5):
    """Worst relative error between analytic and central-difference gradients,
    over ``n_coords`` random coordinates of every parameter tensor."""
    _, grads = model.loss_and_grads(x, y)
    worst = 0.0
    for name, p in model.params.items():
        flat = p.reshape(-1)
        for k in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
            old = flat[k]
            flat[k] = old + eps
            lp, _ = model.loss_and_grads(x, y)
            flat[k] = old - eps
            lm, _ = model.loss_and_grads(x, y)
            flat[k] = old
            num = (lp - lm) / (2 * eps)
            ana = grads[name].reshape(-1)[k]
            denom = max(abs(num), abs(ana), 1e-12)
            worst = max(worst, abs(num - ana) / denom)
    return worst


def randomized_model(n_channels, n_layers, rng, features=4, alpha=2):
    """ConvModel with every parameter (last layer and biases included) non-zero."""
    from bvocsr.sr import ConvModel

    m = ConvModel(n_channels, alpha, features, seed=1, n_layers=n_layers)
    for k, v in m.params.items():
        m.params[k] = rng.uniform(-0.5, 0.5, size=v.shape)
    return m


ACCEPTANCE_RESULTS: list[str] = []


def record_acceptance(number, title, passed, detail=""):
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the summary."""
    status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    line = f"ACCEPTANCE {number:>2} {status}: {title}" + (f" [{detail}]" if detail else "")
    print(line)
    ACCEPTANCE_RESULTS.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)

import numpy as np
import pytest
import torch

from cyclespectral.features import FeatureExtractor
from cyclespectral.flowmodule import SigmaModel
from cyclespectral.warp import ImageTensor

COMPACT_ENCODER = (8, 16, 24, 32, 48, 64)
COMPACT_ESTIMATOR = (32, 32, 24, 16, 8)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def compact_model(spectra=None, seed=0, **kw):
    torch.manual_seed(seed)
    return SigmaModel(spectra or {"rgb": 3, "fir": 1}, COMPACT_ENCODER, COMPACT_ESTIMATOR, **kw)


@pytest.fixture
def model():
    return compact_model()


@pytest.fixture(scope="session")
def phi():
    return FeatureExtractor("relu3_3", backbone="structure")


def rand_image(h, w, spectrum="rgb", c=3, n=1, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return ImageTensor(torch.rand(n, c, h, w, generator=g, dtype=dtype), spectrum)


def central_diff(fn, x, eps=1e-6):
    """Numerical gradient of scalar ``fn`` w.r.t. tensor ``x`` by central differences."""
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(fn(x))
        flat[i] = orig - eps
        fm = float(fn(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return grad


def analytic_grad(fn, x):
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    (g,) = torch.autograd.grad(out, x)
    return g


def grad_rel_err(fn, x, eps=1e-6):
    """Relative L2 gap between autograd and central-difference gradients."""
    x = x.detach().clone()
    ga = analytic_grad(fn, x)
    with torch.no_grad():
        gn = central_diff(fn, x.clone(), eps)
    return float((ga - gn).norm() / gn.norm().clamp_min(1e-12))


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in criterion order."""
    rows = []
    verdicts = {"passed": "PASS", "failed": "FAIL", "error": "FAIL", "xfailed": "FAIL (known, see xfail reason)"}
    for outcome, verdict in verdicts.items():
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" and outcome == "passed":
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props:
                rows.append((props["criterion"], verdict))
    if rows:
        terminalreporter.section("acceptance criteria")
        for title, verdict in sorted(set(rows), key=lambda r: int(r[0].split(".")[0])):
            terminalreporter.write_line(f"{verdict}  {title}")

import numpy as np
import pytest

from amgprune.vit import ModelSpec, VitModel


def tiny_spec(**kw):
    """L=2, H=2, d=4, D=8, N=5."""
    args = dict(image_size=4, patch_size=2, embed_dim=8, layers=2, heads=2, head_dim=4, num_classes=3)
    args.update(kw)
    return ModelSpec.uniform(**args)


def randomized(spec, seed=0, scale=0.5):
    """Model with every parameter drawn at random, so no block starts degenerate."""
    model = VitModel.init(spec, seed=seed, scheme="vit")
    rng = np.random.default_rng(seed + 1000)
    model.load_state({k: rng.normal(0.0, scale, v.shape) for k, v in model.state().items()})
    return model


def images_for(spec, n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, spec.channels, spec.image_size, spec.image_size))


@pytest.fixture
def tiny():
    spec = tiny_spec()
    return randomized(spec), images_for(spec, 3)


# ---- acceptance summary: one PASS/FAIL line per criterion ------------------

_CRITERIA: dict[int, tuple[str, list[bool]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion this test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, (title, []))
    if report.when == "call" or (report.when == "setup" and report.failed):
        entry[1].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, results = _CRITERIA[number]
        verdict = "PASS" if results and all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title} ({sum(results)}/{len(results)} checks)")

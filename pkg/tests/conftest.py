import numpy as np
import pytest

from flipseg.classifier import Classifier, mine_pseudo_samples, train_classifier
from flipseg.grid import SyntheticSpec, generate_synthetic
from flipseg.neural import classifier_net


class MeanClassifier:
    """Stand-in scorer: normal-tissue probability rises linearly with mean intensity.

    Patches with mean <= ``lo`` score normal 0, mean >= ``hi`` score normal 1, so erasing
    a dark nodule with bright fill raises SC in a way tests can compute by hand.
    """

    def __init__(self, lo=60.0, hi=130.0):
        self.lo, self.hi = lo, hi
        self.calls = 0

    def score_batch(self, patches):
        out = []
        for p in patches:
            normal = float(np.clip((np.mean(p) - self.lo) / (self.hi - self.lo), 0.0, 1.0))
            out.append([1.0 - normal, normal])
        return np.array(out).reshape(-1, 2)

    def score(self, patch):
        self.calls += 1
        return self.score_batch([patch])[0]


@pytest.fixture
def mean_classifier():
    return MeanClassifier()


def synthetic_cases(n, seed=0, dims=(96, 96), radius=(10, 16)):
    return [generate_synthetic(SyntheticSpec(dims=dims, radius=radius, seed=seed * 1000 + i)) for i in range(n)]


@pytest.fixture(scope="session")
def small_classifier():
    """A small 2-D classifier trained on mined samples from synthetic images (a few seconds)."""
    samples = []
    for i, (image, _, box) in enumerate(synthetic_cases(30, seed=42)):
        samples += mine_pseudo_samples(image, box, 3, 3, seed=i)
    init = Classifier(classifier_net(2, 16, channels=(8, 16, 16), seed=0), 16)
    clf, report = train_classifier(samples, epochs=15, batch=32, lr=3e-3, seed=0, init=init)
    return clf, report


# ---------------------------------------------------------------- acceptance report
# Acceptance tests carry @pytest.mark.criterion(number, title) and may add a
# record_property("detail", ...); one PASS/FAIL line per criterion is printed at the end.

_acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if report.failed and not detail:
        detail = f"failed during {report.when}"
    _acceptance[marker.args[0]] = ("PASS" if report.passed else "FAIL", marker.args[1], detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_acceptance):
        status, title, detail = _acceptance[key]
        terminalreporter.write_line(f"criterion {key:>2} {status}: {title}; {detail}")

import numpy as np
import pytest

from dereverb.roomsim import build_dataset, generate_clean_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Four train, one valid and two test utterances at a single T60."""
    root = tmp_path_factory.mktemp("tiny")
    for split, n, seed in (("train", 4, 1), ("valid", 1, 2), ("test", 2, 3)):
        generate_clean_corpus(root / "clean" / split, n, seed=seed, duration=(1.0, 1.3))
    manifest = build_dataset(root / "clean", root / "data", seed=0, t60_list=(0.3,), rirs_per_t60=3)
    return root, manifest


# ------------------------------------------------------- acceptance report
#
# Tests marked ``@pytest.mark.criterion(n)`` feed a one-line-per-criterion
# verdict printed at the end of the session. A criterion passes only when
# every one of its tests passed; ``record_property("detail", ...)`` adds the
# measured numbers to the line.

CRITERIA = {
    1: "parameter counts within 1% of the published tables",
    2: "gradient checks and brute-force oracles",
    3: "STFT, normalisation and Griffin-Lim round trips",
    4: "room simulation T60 and direct-path delay",
    5: "training smoke test: overfit, determinism, resume",
    6: "end-to-end LSD ordering model < WPE < NOISY",
    7: "masked-frame recovery probe",
    8: "real-time factor report",
}
_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")
    config.stash[_VERDICTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.skipped:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        details = [str(v) for k, v in item.user_properties if k == "detail"]
        entry = item.config.stash[_VERDICTS].setdefault(marker.args[0], [])
        entry.append((item.name, report.passed, details))


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash[_VERDICTS]
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        results = verdicts[number]
        ok = all(passed for _, passed, _ in results)
        n_ok = sum(passed for _, passed, _ in results)
        terminalreporter.write_line(
            f"criterion {number} {'PASS' if ok else 'FAIL'}: {CRITERIA.get(number, '')} "
            f"({n_ok}/{len(results)} checks passed)"
        )
        for name, passed, details in results:
            if details and (not passed or len(results) <= 12):
                terminalreporter.write_line(f"    {'ok ' if passed else 'BAD'} {name}: {'; '.join(details)}")

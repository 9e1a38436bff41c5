import numpy as np
import pytest
import torch

from mttrans.data import DetectionDataset, ShiftConfig, generate_synthetic_dataset
from mttrans.training import TrainConfig

torch.set_num_threads(1)

_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): a named acceptance criterion, summarized at the end")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = next((v for k, v in item.user_properties if k == "detail"), "")
        _ACCEPTANCE.append((marker.args[0], status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"[{status}] {name}" + (f" -- {detail}" if detail else ""))


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement to the acceptance summary line of the current test."""
    def put(text: str):
        record_property("detail", text)
    return put


@pytest.fixture(scope="session")
def tiny_data():
    """(source, target, val) with a handful of images, in memory."""
    manifests = generate_synthetic_dataset(8, 8, 4, seed=11, shift=ShiftConfig(fog_intensity=0.6))
    return tuple(DetectionDataset(m) for m in manifests)


@pytest.fixture
def tiny_config():
    """A config small enough that an epoch on tiny_data takes well under a second."""
    return TrainConfig(burn_in_epochs=2, transfer_epochs=2, lr_decay_epoch=1, lr_decay_epoch_transfer=1,
                       d_model=32, n_heads=4, n_enc=1, n_dec=1, n_queries=6, n_prototypes=3, lr_transfer=1e-4,
                       alpha=0.5, lambda_grl=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import pytest

from canet.synth import generate_dataset
from canet.train import TrainConfig

TINY = dict(image_size=32, cod_widths=(4, 4, 8, 8, 8), fusion_width=4, cem_widths=(2, 2, 4, 4, 4),
            batch_size=4)


def tiny_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**TINY, "epochs": 1, **overrides})


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(root / "train", 10, 32, 0, 0.5)
    generate_dataset(root / "test", 4, 32, 500, 0.5)
    return root / "train", root / "test"


# one verdict line per acceptance criterion, shown after the run
ACCEPTANCE: dict[int, str] = {}


def record_verdict(number: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

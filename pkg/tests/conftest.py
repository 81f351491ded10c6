import hashlib
import os
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

REPO = Path(__file__).resolve().parent.parent
SRC = REPO / "src" / "gensup"


def source_digest() -> str:
    """Hash of the package source; cache keys include it so cached training
    artifacts invalidate whenever any code that could affect them changes."""
    h = hashlib.sha256()
    for path in sorted(SRC.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def artifact_root() -> Path:
    root = os.environ.get("GENSUP_TEST_ARTIFACTS", str(REPO / "runs" / "test_artifacts"))
    path = Path(root) / source_digest()
    path.mkdir(parents=True, exist_ok=True)
    return path


def cached_dir(name: str, build_fn) -> Path:
    """Build-once directory artifact; a DONE marker commits it."""
    path = artifact_root() / name
    marker = path / "DONE"
    if not marker.exists():
        path.mkdir(parents=True, exist_ok=True)
        build_fn(path)
        marker.write_text("ok\n")
    return path


@pytest.fixture(scope="session")
def small_dataset_dir():
    from gensup.dataset import build_dataset

    def build(path: Path):
        build_dataset(40, seed=7, out_dir=path)

    return cached_dir("ds40", build)


@pytest.fixture(scope="session")
def small_dataset(small_dataset_dir):
    from gensup.dataset import load_dataset
    return load_dataset(small_dataset_dir)


@pytest.fixture(scope="session")
def vocab(small_dataset_dir):
    from gensup.vocab import Vocabulary
    return Vocabulary.from_file(Path(small_dataset_dir) / "vocab.txt")


@pytest.fixture()
def toy_model(vocab):
    from gensup.model import JointModel, toy_model_config
    model = JointModel(toy_model_config(len(vocab)))
    model.init_parameters(3)
    return model


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'} — {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
        summary = artifact_root() / "acceptance_summary.txt"
        summary.write_text("\n".join(ACCEPTANCE_LINES) + "\n")

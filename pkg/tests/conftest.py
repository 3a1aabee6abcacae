import numpy as np
import pytest
import torch

from ovpanoptic.config import config_from_dict


def small_config(**sections):
    """A fast configuration for unit tests; keyword arguments merge into sections."""
    values = {
        "data": {"num_images": 4, "image_size": 32, "min_size": 8, "max_size": 12, "max_things": 2},
        "masks": {"num_queries": 6, "hidden_dim": 32, "decoder_layers": 2},
        "optim": {"iterations": 2, "batch_size": 2, "lr": 1e-3},
        "log": {"every": 1},
    }
    for key, value in sections.items():
        if isinstance(value, dict):
            values.setdefault(key, {}).update(value)
        else:
            values[key] = value
    return config_from_dict(values)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


# criterion number -> (title, [(part, passed, detail)])
ACCEPTANCE: dict[int, tuple[str, list[tuple[str, bool, str]]]] = {}


def record_criterion(number: int, title: str, part: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE.setdefault(number, (title, []))[1].append((part, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, parts = ACCEPTANCE[number]
        ok = all(p for _, p, _ in parts)
        details = "; ".join(f"{name}{' ' + d if d else ''}{'' if p else ' FAILED'}" for name, p, d in parts)
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} [{details}]")

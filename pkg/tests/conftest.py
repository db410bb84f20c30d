import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def double():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


# --- acceptance reporting: one PASS/FAIL line per criterion in the terminal summary ---

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        detail = "; ".join(self.details)
        if exc is not None:
            detail = f"{detail}; {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}".lstrip("; ")
        _ACCEPTANCE[self.number] = (self.title, exc is None, detail)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n}. {title}: {detail}")

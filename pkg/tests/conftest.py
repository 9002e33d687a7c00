import pytest

from exitembed.datagen import generate
from exitembed.encoder import init_encoder
from exitembed.exit_oracle import label_exits

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] {number:2d}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))


@pytest.fixture(scope="session")
def stack():
    return init_encoder()


@pytest.fixture(scope="session")
def corpus():
    return generate(60, seed=11)


@pytest.fixture(scope="session")
def labels(stack, corpus):
    return label_exits(stack, corpus, "A")

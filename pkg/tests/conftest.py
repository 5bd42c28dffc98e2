import numpy as np
import pytest

from gridseek import ndgrad as nd
from gridseek.data import gen_synthetic
from gridseek.imops import Image, read_image


@pytest.fixture(scope="session")
def shapes_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("shapes")
    gen_synthetic(16, 64, 3, out)
    return out


@pytest.fixture(scope="session")
def shapes_images(shapes_dir):
    from gridseek.data import scan_images
    return [(image_id, read_image(path)) for image_id, path in scan_images(shapes_dir)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_image(rng):
    return Image(rng.random((24, 32, 3)))


@pytest.fixture
def fp64():
    with nd.precision("fp64"):
        yield


# ------------------------------------------------------------ acceptance

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(capsys):
    """Record one acceptance criterion's outcome and fail the test if it missed."""

    def record(number: int, checks: dict[str, tuple[bool, str]]):
        ok = all(passed for passed, _ in checks.values())
        detail = "; ".join(f"{name}: {'ok' if passed else 'MISS'} ({info})"
                           for name, (passed, info) in checks.items())
        _CRITERIA[number] = (ok, detail)
        with capsys.disabled():
            print(f"\nacceptance {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

import numpy as np
import pytest

from pgnet.encoder import EncoderConfig, init_frozen


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    # 16x16 images, s=4: 4x4 grid, C=48 = 3s^2 (square projection)
    return EncoderConfig(image_h=16, image_w=16, patch_size=4, embed_dim=48, depth=2, heads=4, r_max=2)


@pytest.fixture(scope="session")
def small_enc(small_cfg):
    return init_frozen(small_cfg, seed=3)


def pytest_collection_modifyitems(config, items):
    # run the slow acceptance suite last so quick failures show up first
    items.sort(key=lambda it: it.get_closest_marker("slow") is not None)


# -- acceptance report ---------------------------------------------------------
# test_acceptance records one line per criterion here; the lines are printed in
# the terminal summary so they survive output capturing.
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])

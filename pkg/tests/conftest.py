import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from multiconcept.backend import ToyConfig, ToyUNet
from multiconcept.config import load_run_config

ACCEPTANCE_LINES = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    label = getattr(report, "acceptance_label", None)
    if label:
        status = "PASS" if report.outcome == "passed" else "FAIL"
        ACCEPTANCE_LINES.append(f"[{status}] {label}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker:
        report.acceptance_label = marker.args[0]


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): one headline acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("."))):
            terminalreporter.write_line(line)


# -- shared fixtures ---------------------------------------------------------------

def make_scene(path, size=128):
    """Grey background with an orange block on the left and a blue block on the right."""
    img = np.full((size, size, 3), 0.35)
    img[size // 4:3 * size // 4, size // 16:7 * size // 16] = (0.9, 0.5, 0.2)
    img[5 * size // 16:13 * size // 16, 9 * size // 16:15 * size // 16] = (0.2, 0.3, 0.8)
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)
    return Path(path)


DOG = {"id": "dog", "tokens": ["<dog1>", "<dog2>"], "class_word": "dog", "similar_tokens": ["cat"],
       "seed_box": [0.05, 0.25, 0.45, 0.75], "adapter_seed": 11}
CAT = {"id": "cat", "tokens": ["<cat1>", "<cat2>"], "class_word": "cat", "similar_tokens": ["dog"],
       "seed_box": [0.55, 0.3, 0.95, 0.8], "adapter_seed": 12}


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    make_scene(d / "ref.png")
    return d


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("cache")


@pytest.fixture(scope="session")
def base_config_dict(scene_dir, cache_dir):
    return {
        "prompt": "A dog and a cat on the beach",
        "reference_image": str(scene_dir / "ref.png"),
        "concepts": [dict(DOG), dict(CAT)],
        "seeds": [0],
        "cache_dir": str(cache_dir),
    }


@pytest.fixture(scope="session")
def make_config(base_config_dict):
    def build(overrides=(), **updates):
        data = {**base_config_dict, **updates}
        return load_run_config(data=data, overrides=list(overrides))
    return build


@pytest.fixture(scope="session")
def full_run(make_config):
    """The seeded two-concept toy fixture with every feature on, seed 0."""
    from multiconcept.pipeline import prepare_run, run_generation

    cfg = make_config()
    t0 = time.perf_counter()
    ctx = prepare_run(cfg)
    result = run_generation(ctx, 0)
    elapsed = time.perf_counter() - t0
    return {"config": cfg, "ctx": ctx, "result": result, "seconds": elapsed}


@pytest.fixture(scope="session")
def toy():
    return ToyUNet(ToyConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

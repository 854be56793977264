import os
import sys
from pathlib import Path

import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_scene(tmp_path_factory):
    from nlvehicle.synthetic import SceneConfig, generate_synthetic_scene

    root = tmp_path_factory.mktemp("scene")
    cfg = SceneConfig(num_vehicles=8, num_frames=12)
    return generate_synthetic_scene(cfg, 3, root)


# acceptance criteria report: one line per criterion in the terminal summary
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    def record(name: str, ok: bool, detail: str) -> None:
        ACCEPTANCE[name] = (bool(ok), detail)
        assert ok, f"{name} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'} {detail}")

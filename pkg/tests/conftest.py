import pytest
import torch

from vidtwin.config import desk_model_config, tiny_model_config
from vidtwin.model import VidTwin


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return VidTwin(tiny_cfg).eval()


@pytest.fixture(scope="module")
def desk_model():
    torch.manual_seed(0)
    return VidTwin(desk_model_config()).eval()


def pytest_terminal_summary(terminalreporter):
    # echo the acceptance report lines even when stdout was captured
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call":
                lines += [ln for ln in rep.capstdout.splitlines() if ln.startswith("[criterion")]
    if lines:
        terminalreporter.section("acceptance report")
        for ln in sorted(lines, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(ln)

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kvstream.backbone import BackboneConfig, init_backbone, project_block
from kvstream.gcm import init_gru
from kvstream.packer import PackerConfig, TokenRecord, pack


class BlockFactory:
    def __init__(self, layers=4, heads=2, head_dim=4, dim=6, block_size=3, seed=0):
        self.cfg = BackboneConfig(input_dim=dim, layers=layers, heads=heads, head_dim=head_dim, seed=seed)
        self.weights = init_backbone(self.cfg)
        self.gru = init_gru(heads * head_dim, seed=seed)
        self.block_size = block_size
        self.dim = dim
        self.rng = np.random.default_rng(seed)

    def blocks(self, n):
        toks = [
            TokenRecord(1 + i, 0, self.rng.standard_normal(self.dim))
            for i in range(n * self.block_size)
        ]
        return pack(toks, PackerConfig(self.block_size))

    def layer_kvs(self, n):
        return [project_block(self.weights, b) for b in self.blocks(n)]


@pytest.fixture
def factory():
    return BlockFactory()


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}" + (f" ({detail})" if detail else "")
        print(line)
        lines.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

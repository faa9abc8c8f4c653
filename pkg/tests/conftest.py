import sys

import pytest
import torch

from sourcefree.data import make_synthetic_pair
from sourcefree.models import Generator, SourceClassifier
from sourcefree.training import source_config, train_source

torch.set_num_threads(1)


def tiny_classifier(seed=0, widths=(4, 6, 8), image_size=8, dtype=torch.float64):
    """Small classifier with non-trivial stored statistics, frozen."""
    torch.manual_seed(seed)
    m = SourceClassifier(num_classes=5, widths=widths, image_size=image_size, kernel_size=3)
    g = torch.Generator().manual_seed(seed + 1)
    for bn in m.bns:
        bn.running_mean.copy_(torch.randn(bn.num_features, generator=g) * 0.3)
        bn.running_var.copy_(torch.rand(bn.num_features, generator=g) + 0.5)
        bn.weight.data.copy_(1 + 0.2 * torch.randn(bn.num_features, generator=g))
        bn.bias.data.copy_(0.2 * torch.randn(bn.num_features, generator=g))
    return m.to(dtype).freeze()


def tiny_generator(seed=0, dtype=torch.float64, init_scale=1.0):
    torch.manual_seed(seed)
    return Generator(width=2, n_blocks=1, init_scale=init_scale).to(dtype)


@pytest.fixture(scope="session")
def synth_small():
    return make_synthetic_pair(0, 20, "color_tint")


@pytest.fixture(scope="session")
def synth_classifier(synth_small):
    """Narrow classifier trained briefly on the synthetic source domain."""
    return train_source(synth_small.source, {"widths": [8, 16, 16]},
                        source_config(epochs=3, batch_size=32, seed=0))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.REPORT):
        terminalreporter.write_line(line)

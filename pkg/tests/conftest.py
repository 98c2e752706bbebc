import sys

import pytest
import torch
import torch.nn as nn

from freqpure.diffusion import DiffusionSchedule
from freqpure.models import ToyDatasetSpec, make_toy_dataset, train_toy_classifier, train_toy_score_model

# Small trained pipeline shared by the model, bench and CLI tests.
SMALL_SPEC = ToyDatasetSpec(train_size=2000, val_size=100, test_size=400, seed=3)


class LinearClassifier(nn.Module):
    def __init__(self, shape=(1, 8, 8), classes=2):
        super().__init__()
        self.fc = nn.Linear(shape[0] * shape[1] * shape[2], classes)

    def forward(self, x):
        return self.fc(x.flatten(1))


def linear_problem(n=300, seed=0, shape=(1, 8, 8)):
    """Two classes separated by the sign of a fixed random direction."""
    w = torch.randn(shape, generator=torch.Generator().manual_seed(1234))
    g = torch.Generator().manual_seed(seed)
    x = torch.rand((n, *shape), generator=g, dtype=torch.float32)
    score = ((x - 0.5) * w).flatten(1).sum(1)
    keep = score.abs() > 0.3
    return x[keep], (score[keep] > 0).long()


@pytest.fixture(scope="session")
def linear_model():
    x, y = linear_problem(n=3000, seed=0)
    torch.manual_seed(0)
    model = LinearClassifier()
    opt = torch.optim.Adam(model.parameters(), lr=0.05)
    for _ in range(500):
        loss = nn.functional.cross_entropy(model(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@pytest.fixture(scope="session")
def small_data():
    return make_toy_dataset(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_classifier(small_data):
    return train_toy_classifier(SMALL_SPEC, epochs=8, seed=0, dataset=small_data)


@pytest.fixture(scope="session")
def small_score(small_data):
    return train_toy_score_model(SMALL_SPEC, DiffusionSchedule(), epochs=3, seed=0, dataset=small_data)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

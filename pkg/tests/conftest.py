import pytest

from pasadena.classifier import TRANSFER_WIDTHS, Classifier, generate_toy_dataset, train

TRAIN_SEED = 0
PER_CLASS = 200
EPOCHS = 10


@pytest.fixture(scope="session")
def train_set():
    return generate_toy_dataset(TRAIN_SEED, PER_CLASS)


@pytest.fixture(scope="session")
def model_a(train_set):
    """The attacked classifier, trained once per session (about 30 s)."""
    model = Classifier()
    train(model, train_set, epochs=EPOCHS, seed=0)
    return model


@pytest.fixture(scope="session")
def model_b(train_set):
    """A narrower, separately seeded classifier used for transfer evaluation."""
    model = Classifier(TRANSFER_WIDTHS)
    train(model, train_set, epochs=EPOCHS, seed=1)
    return model


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)

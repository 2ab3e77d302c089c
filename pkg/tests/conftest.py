import pytest

from narlab import ARTranslator
from narlab.corpus import gen_task


@pytest.fixture(scope="session")
def lexicon_task():
    return gen_task("lexicon", n_train=2000, n_dev=200, n_test=200, seed=0)


@pytest.fixture(scope="session")
def lexicon_pair_models(lexicon_task):
    """Forward (fully trained) and backward (briefly trained) Tiny AR models on the lexicon task."""
    src = [p.src for p in lexicon_task.train]
    tgt = [p.tgt for p in lexicon_task.train]
    fwd = ARTranslator(epochs=30, seed=0).fit(src, tgt)
    bwd = ARTranslator(epochs=8, seed=1).fit(tgt, src)
    return fwd, bwd


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    verdicts = getattr(acceptance, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])

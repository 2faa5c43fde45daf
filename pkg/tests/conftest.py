import pytest

from mtkd.corpus import CorpusSpec, generate_corpus
from mtkd.models import ModelConfig
from mtkd.training import TrainConfig, pretrain_mt, pretrain_tir

TOY_SPEC = CorpusSpec(alphabet="abcd", min_len=1, max_len=3, n_train=200, n_valid=40, n_test=40)
TOY_MODEL = ModelConfig(d_model=32, d_ff=64, src_vocab=8, tgt_vocab=8, dropout=0.0)
TEACHER_CFG = TrainConfig(epochs=30, learning_rate=3e-3)

# filled by test_acceptance.report, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_corpus():
    return generate_corpus(TOY_SPEC)


@pytest.fixture(scope="session")
def teacher_dir(tmp_path_factory, toy_corpus):
    out = tmp_path_factory.mktemp("teachers")
    tir = pretrain_tir(toy_corpus, TOY_MODEL, TEACHER_CFG, out)
    mt = pretrain_mt(toy_corpus, TOY_MODEL, TEACHER_CFG, out)
    return {"dir": out, "tir": tir, "mt": mt}

import pytest
import torch

from semqg.data import tokenize_all
from semqg.toy import ToyLanguageSpec, make_toy_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def spec():
    return ToyLanguageSpec()


@pytest.fixture(scope="session")
def tagger(spec):
    return spec.tagger()


@pytest.fixture(scope="session")
def corpus(spec):
    return make_toy_corpus(spec, 200, 100, 400)


@pytest.fixture(scope="session")
def tok_train(corpus, tagger):
    return tokenize_all(corpus.train, tagger)


@pytest.fixture(scope="session")
def tok_dev(corpus, tagger):
    return tokenize_all(corpus.dev, tagger)


@pytest.fixture(scope="session")
def paraphrase_data(spec):
    from semqg.toy import make_paraphrase_pairs
    split = lambda ps: [(a.lower().split(), b.lower().split(), y) for a, b, y in ps]
    return split(make_paraphrase_pairs(spec, 500, 1)), split(make_paraphrase_pairs(spec, 200, 2))


@pytest.fixture(scope="session")
def trained_qpc(spec, paraphrase_data):
    from semqg.rewards import QPCConfig, train_qpc
    from semqg.text import Vocabulary
    train, dev = paraphrase_data
    history = []
    model = train_qpc(train, dev, QPCConfig(epochs=50), vocab=Vocabulary(spec.lexicon()), log=history.append)
    return model, history


@pytest.fixture(scope="session")
def trained_qa(tok_train, tok_dev):
    from semqg.rewards import QAConfig, train_qa
    history = []
    model = train_qa(tok_train, tok_dev, QAConfig(), log=history.append)
    return model, history


@pytest.fixture(scope="session")
def qg_vocab(tok_train):
    from semqg.text import Vocabulary
    return Vocabulary.build([e.context_tokens for e in tok_train] + [e.question_tokens for e in tok_train])


@pytest.fixture(scope="session")
def memorized_runs(tok_train, qg_vocab):
    """Teacher forcing on the 200-example train split until 95% train accuracy; one run per seed."""
    import time
    from semqg.qg import QGConfig, QGModel
    from semqg.trainer import TrainConfig, train_teacher_forcing
    runs = []
    for seed in range(3):
        t0 = time.perf_counter()
        cfg = TrainConfig(epochs=200, seed=seed, target_accuracy=0.95, patience=200)
        # memorization is a capacity check, so dropout is off
        res = train_teacher_forcing(QGModel(QGConfig(dropout=0.0), qg_vocab, seed=seed), tok_train, [], cfg)
        res.seconds = time.perf_counter() - t0
        runs.append(res)
    return runs


@pytest.fixture(scope="session")
def qg_checkpoints(tok_train, tok_dev, qg_vocab):
    """seed -> (converged model, 1-epoch model), both trained with teacher forcing."""
    from semqg.qg import QGConfig, QGModel
    from semqg.trainer import TrainConfig, train_teacher_forcing
    out = {}
    for seed in range(3):
        conv = train_teacher_forcing(QGModel(QGConfig(), qg_vocab, seed=seed), tok_train, tok_dev,
                                     TrainConfig(epochs=200, seed=seed))
        one = train_teacher_forcing(QGModel(QGConfig(), qg_vocab, seed=seed), tok_train, tok_dev,
                                    TrainConfig(epochs=1, seed=seed))
        out[seed] = (conv.model, one.model)
    return out


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

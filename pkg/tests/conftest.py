import numpy as np
import pytest
import torch

from futuretod.config import PretrainConfig
from futuretod.corpus import Dialogue, Utterance
from futuretod.encoder import EncoderConfig, init_params
from futuretod.synth import SynthSpec, synth_corpus
from futuretod.tokenizer import build_vocab


def make_dialogue(*texts, id="d"):
    roles = ("user", "system")
    return Dialogue(id, tuple(Utterance(roles[i % 2], t) for i, t in enumerate(texts)))


@pytest.fixture
def dialogue():
    return make_dialogue("i need a taxi", "where to ?", "to the station", "booked , anything else ?",
                         "no thanks", "bye")


@pytest.fixture(scope="session")
def small_corpus():
    return synth_corpus(SynthSpec(dialogues=40, intents=4), np.random.default_rng(0))


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocab(small_corpus)


@pytest.fixture
def tiny_pretrain_config():
    return PretrainConfig(epochs=2, sync_interval=1, layers=2, hidden_dim=16, heads=2, ffn_dim=32,
                          max_len=96, batch_size=8, learning_rate=1e-3, checkpoint_every=1)


@pytest.fixture
def tiny_encoder(small_vocab):
    cfg = EncoderConfig(vocab_size=len(small_vocab), layers=2, hidden_dim=16, heads=2, ffn_dim=32, max_len=96)
    return init_params(cfg, seed=0)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


# ------------------------------------------------------- acceptance summary

ACCEPTANCE_DETAILS: dict[int, list[str]] = {}
_ACCEPTANCE_OUTCOMES: dict[int, list[str]] = {}


def note(criterion, text):
    """Attach a measured value to an acceptance criterion's summary line."""
    ACCEPTANCE_DETAILS.setdefault(criterion, []).append(text)


def _criterion_of(nodeid):
    name = nodeid.split("::")[-1]
    if "test_acceptance.py" not in nodeid or not name.startswith("test_criterion_"):
        return None
    return int(name[len("test_criterion_"):].split("_")[0])


def pytest_runtest_logreport(report):
    n = _criterion_of(report.nodeid)
    if n is not None and (report.when == "call" or report.outcome != "passed"):
        _ACCEPTANCE_OUTCOMES.setdefault(n, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE_OUTCOMES):
        outcomes = _ACCEPTANCE_OUTCOMES[n]
        status = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        detail = "; ".join(ACCEPTANCE_DETAILS.get(n, []))
        terminalreporter.write_line(f"criterion {n}: {status}" + (f"  {detail}" if detail else ""))

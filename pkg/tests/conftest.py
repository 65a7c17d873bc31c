import sys

import numpy as np
import pytest

from sentigen.autodiff import backward, finite_diff_check, zero_grads
from sentigen.cli import make_synthetic_corpus
from sentigen.data import Registry, load_corpus
from sentigen.model import ModelConfig, init_params
from sentigen.prompt import build_vocab


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    """Shared read-only synthetic world: corpus, registry, records, vocab."""
    out = tmp_path_factory.mktemp("toy")
    corpus_path, registry_path = make_synthetic_corpus(out, seed=5, per_task=6)
    registry = Registry.load(registry_path)
    records = load_corpus(corpus_path, registry)
    vocab = build_vocab(records, registry, num_speakers=8)
    return {
        "dir": out,
        "corpus_path": corpus_path,
        "registry_path": registry_path,
        "registry": registry,
        "records": records,
        "vocab": vocab,
    }


def small_config(vocab, registry, **overrides):
    base = dict(model_dim=16, text_embed_dim=16, acoustic_dim=8, visual_dim=4,
                layers_enc=1, layers_dec=1, heads=2, ffn_dim=32, max_len=96,
                vocab_size=len(vocab), num_datasets=len(registry), dropout_rate=0.0)
    base.update(overrides)
    return ModelConfig(**base).validate()


@pytest.fixture(scope="session")
def toy_model(toy):
    """A fixed random tiny model over the toy vocabulary."""
    config = small_config(toy["vocab"], toy["registry"])
    params = init_params(config, np.random.default_rng(42))
    return {"config": config, "params": params}


def grad_of(loss_fn, params, name):
    """Analytic gradient of loss_fn() with respect to params[name]."""
    zero_grads(params.values())
    backward(loss_fn())
    g = params[name].grad
    return np.zeros_like(params[name].data) if g is None else g.copy()


def fd_check_param(loss_fn, params, name):
    """finite_diff_check over every coordinate of one parameter tensor."""
    return finite_diff_check(lambda t: loss_fn(), params[name])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "CRITERION_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def fd_check_coords(loss_fn, params, name, coords, eps=1e-5):
    """Central-difference check restricted to chosen flat coordinates of one
    (possibly large) parameter tensor; same error formula as
    finite_diff_check."""
    analytic = grad_of(loss_fn, params, name).reshape(-1)
    flat = params[name].data.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn().item()
        flat[i] = orig - eps
        lo = loss_fn().item()
        flat[i] = orig
        central = (hi - lo) / (2.0 * eps)
        worst = max(worst, abs(analytic[i] - central) / max(1.0, abs(central)))
    return worst

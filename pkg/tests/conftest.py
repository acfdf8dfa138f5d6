import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from specbeam.beam import IdentifierTrie
from specbeam.toymodel import SynthWorld, TabularModel, gen_world

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.register_profile("thorough", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion name -> (passed, message); printed once at the end of the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {msg}")


def tiny_world(seed=0, n_items=12, codebook=(3, 3, 3), n_users=30, skew=1.0):
    return gen_world(n_items=n_items, n_users=n_users, L=len(codebook), codebook=codebook, skew=skew, seed=seed)


def world_from_items(items, contexts=(0,)):
    """Hand-built world: one user per context, each with that context as history."""
    items = [tuple(s) for s in items]
    codebook = [max(s[t] for s in items) + 1 for t in range(len(items[0]))]
    users = [{"history": [int(c)], "next": 0} for c in contexts]
    return SynthWorld(items=items, users=users, L=len(items[0]), codebook=codebook)


def random_model(world, rng, scale=2.0, window=None, buckets=None, contexts=None):
    """Tabular model with Gaussian logits on every (context, trie prefix) row."""
    m = TabularModel(world.vocab_size, world.L, context_window=window, context_buckets=buckets)
    trie = IdentifierTrie(world.items)
    if contexts is None:
        contexts = sorted({world.context_of(u) for u in range(len(world.users))})
    keys = list(dict.fromkeys(m.key(c, p) for c in contexts for d in range(world.L) for p in trie.prefixes(d)))
    m.ensure_rows(keys)
    m.table = rng.normal(0.0, scale, m.table.shape)
    return m


def set_logits(model, context_id, prefix, logits: dict):
    """Write logits for the given tokens on one row (others stay 0)."""
    i = model.ensure_rows([model.key(context_id, prefix)])[0]
    for tok, z in logits.items():
        model.table[i, tok] = z


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_world():
    return gen_world(seed=0)


@pytest.fixture(scope="session")
def default_target(default_world):
    from specbeam.toymodel import train_target

    return train_target(default_world)

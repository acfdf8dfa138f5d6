"""Speculative decoding for trie-constrained top-K beam search, with draft alignment."""
from .core import CallLedger, Distribution, ScoredBeam, normalize, sample, top_k, tvd
from .beam import BeamConfig, IdentifierTrie, beam_search
from .specdec import SDConfig, sd_decode
from .toymodel import SynthWorld, TabularModel, gen_world, train_target

__all__ = [
    "BeamConfig", "CallLedger", "Distribution", "IdentifierTrie", "SDConfig", "ScoredBeam", "SynthWorld",
    "TabularModel", "beam_search", "gen_world", "normalize", "sample", "sd_decode", "top_k", "train_target", "tvd",
]

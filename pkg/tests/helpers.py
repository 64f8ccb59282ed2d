"""Small builders shared by the unit tests."""

import torch

from diffant.data import default_grammar, generate_dataset, split_observation, subsample
from diffant.net import DiffAnt, ModelConfig
from diffant.train import collate


def tiny_config(**kw):
    base = dict(input_dim=32, num_classes=13, hidden_dim=8, decoder_dim=8, encoder_layers=1,
                decoder_layers=1, heads=2, ffn_mult=2, dropout=0.0, num_queries=4, max_steps=50)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    return DiffAnt(tiny_config(**kw)).to(dtype)


def tiny_batch(n=3, alpha=0.3, M=4, dtype=torch.float64, multilabel=False, seed=0):
    grammar = default_grammar()
    videos = [subsample(v, 8) for v in generate_dataset(grammar, n, seed)]
    obs = [split_observation(v, alpha, M, grammar.vocab.eos_id) for v in videos]
    return collate(obs, grammar.vocab.C, multilabel=multilabel, dtype=dtype)

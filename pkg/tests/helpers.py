"""Shared builders for the model-level tests and the acceptance suite."""

import numpy as np

from oracles import numeric_grad, rel_err
from seqqa import tensor as T
from seqqa.model import ModelConfig, Seq2SeqModel, batch_loss
from seqqa.training import EncodedPair, collate

TINY_VOCAB = 9


def tiny_model(variant, H=3, E=4, V=TINY_VOCAB, max_src_len=6, seed=0):
    tok = "word" if variant == "bilstm_embeddings" else "character"
    cfg = ModelConfig(variant, V, H, E, max_src_len, tokenization=tok)
    model = Seq2SeqModel(cfg).initialize(T.make_rng(seed, "init"))
    # push weights away from the tiny-init regime so every path carries gradient
    rng = np.random.default_rng(seed + 100)
    for p in model.parameters():
        p.value.data = rng.normal(scale=0.6, size=p.value.shape)
    return model


def model_gradient_errors(variant, seed=0, batch=None):
    """Max relative error per parameter between backprop and central differences."""
    model = tiny_model(variant, seed=seed)
    if batch is None:
        batch = collate([EncodedPair([4, 5, 6, 7], [8, 4, 5])])  # length-4 pair
    loss = lambda: batch_loss(model, batch.src, batch.src_len, batch.tgt)
    T.backward(loss())
    analytic = {p.name: p.grad.copy() for p in model.parameters()}
    errors = {}
    with T.no_grad():
        for p in model.parameters():
            numeric = numeric_grad(lambda: loss().item(), p.value.data)
            errors[p.name] = rel_err(analytic[p.name], numeric)
    return errors

"""CNN discriminator over complete sentences: the adversarial final reward.

Same conv-stack shape as the encoder but with its own embedding table and a
single sigmoid output, so scores live strictly in (0, 1).
"""

import numpy as np

from . import autodiff as ad
from .corpus import PAD
from .encoder import ConvStack, pad_rows
from .errors import ContractError


class DiscriminatorParams:
    def __init__(self, vocab_size, profile, rng):
        self.profile = profile
        self.vocab_size = vocab_size
        emb = rng.normal(0.0, 0.1, size=(vocab_size, profile.embed_dim))
        emb[PAD] = 0.0
        self.embedding = ad.Tensor(emb, requires_grad=True)
        self.stack = ConvStack(profile, 1, rng, "discriminator")

    def tensors(self):
        return ([("discriminator.embedding", self.embedding)]
                + self.stack.tensors())


def score_batch(sentences, params):
    """Probability-of-real for each sentence; (B,) tensor in (0, 1)."""
    rows = pad_rows([list(s) for s in sentences], params.profile.pad_width)
    flat = ad.gather_rows(params.embedding, rows.reshape(-1))
    emb = ad.reshape(flat, (rows.shape[0], params.profile.pad_width,
                            params.profile.embed_dim))
    raw = params.stack.apply(emb, final_relu=False)
    return ad.sigmoid(ad.reshape(raw, (rows.shape[0],)))


def score(sentence, params):
    """Probability that one sentence is real."""
    with ad.no_grad():
        return float(score_batch([sentence], params).values[0])


_CLAMP = 1e-12  # keeps log() finite when sigmoid rounds to exactly 0 or 1


def _clamped(s):
    return ad.add(ad.scale(s, 1.0 - 2.0 * _CLAMP),
                  ad.constant(np.full(s.shape, _CLAMP)))


def bce_loss(real_batch, fake_batch, params):
    """Binary cross-entropy with real->1, fake->0, averaged over all examples."""
    if not real_batch or not fake_batch:
        raise ContractError("both batches must be non-empty")
    s_real = _clamped(score_batch(real_batch, params))
    s_fake = _clamped(score_batch(fake_batch, params))
    ones = ad.constant(np.ones(len(fake_batch)))
    real_term = ad.tsum(ad.log(s_real))
    fake_term = ad.tsum(ad.log(ad.sub(ones, s_fake)))
    total = len(real_batch) + len(fake_batch)
    return ad.scale(ad.add(real_term, fake_term), -1.0 / total)


def train_step(real_batch, fake_batch, params, optimizer):
    """One Adam step on the discriminator; returns the scalar loss value."""
    with ad.tape():
        loss = bce_loss(real_batch, fake_batch, params)
        ad.backward(loss)
    optimizer.step()
    optimizer.zero_grad()
    return loss.item()

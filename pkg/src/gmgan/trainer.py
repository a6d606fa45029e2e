"""Training orchestration: MLE pretraining, policy-gradient fine-tuning with
feature-matching rewards, and the full adversarial loop.

Parameter groups are disjoint: the generator group owns the encoder, the
shared embedding, the decoder side and the initial-state projection; the
guider group owns the guider LSTM and head; the discriminator owns itself.
The guider trains only on its own dual-cosine objective and is held fixed
while the generator updates (its predictions enter generator losses as
constants), and generator losses never push gradients into the encoder
through the guider's inputs.
"""

import copy
import json
import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import BOS, PAD
from .discriminator import DiscriminatorParams, score_batch, train_step
from .encoder import (EncoderParams, draw_initial_noise, encode_batch,
                      get_profile, mean_feature_norm, pad_rows)
from .errors import ContractError, TrainingDiverged
from .generator import (GeneratorParams, initial_hidden, mle_loss,
                        sample_sequence, teacher_forced_log_probs)
from .guider import GuiderParams, guider_loss_batch, initial_state
from .optim import Adam
from .rewards import RewardBaseline, compute_reward_trace

VALID_C = (2, 3, 4, 5, 8)


@dataclass
class TrainConfig:
    seed: int = 0
    profile: str = "paper"
    max_len: int = 25
    c: int = 4
    gamma: float = 0.25
    discount_convention: str = "relative"
    baseline: bool = True
    baseline_momentum: float = 0.99
    lr_generator: float = 2e-4
    lr_guider: float = 2e-4
    lr_discriminator: float = 1e-3
    batch_size: int = 32
    mle_epochs: int = 10
    rl_epochs: int = 2
    g_steps: int = 1
    d_steps: int = 1
    guider_extra_epochs: int = 2
    rollout_batch: int = 16
    ablation: str = "both"
    rl_mix: object = "ramp"          # "ramp" or a fixed float in [0, 1]
    eval_samples: int = 64
    style_mode: bool = False
    style_epochs: int = 6
    classifier_epochs: int = 4
    weight_reconstruction: float = 1.0
    # measured gradient scales: the soft-argmax classifier term is ~40x the
    # reconstruction term, so its weight is small for reconstruction to lead
    weight_classifier: float = 0.03
    weight_entropy: float = 0.1
    soft_argmax_temperature: float = 0.1

    def __post_init__(self):
        if min(self.lr_generator, self.lr_guider, self.lr_discriminator) <= 0:
            raise ContractError("learning rates must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError("gamma must lie in [0, 1)")
        if self.c not in VALID_C:
            raise ContractError("c must be one of %r" % (VALID_C,))
        if self.discount_convention not in ("relative", "absolute"):
            raise ContractError("unknown discount convention")
        if self.ablation not in ("both", "final-only", "stepwise-only"):
            raise ContractError("unknown ablation mode")
        if self.rl_mix != "ramp" and not (isinstance(self.rl_mix, (int, float))
                                          and 0.0 <= float(self.rl_mix) <= 1.0):
            raise ContractError("rl_mix must be 'ramp' or a float in [0, 1]")


def stream_rng(seed, domain, *indices):
    """Independent deterministic rng stream per concern and epoch/step."""
    key = (zlib.crc32(domain.encode("utf-8")),) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=key))


class Models:
    """Encoder, generator, guider and discriminator built over one profile."""

    def __init__(self, vocab_size, config, style_labels=0):
        self.config = config
        self.profile = get_profile(config.profile, max_len=config.max_len)
        self.vocab_size = vocab_size
        rng = stream_rng(config.seed, "init")
        self.encoder = EncoderParams(vocab_size, self.profile, rng)
        self.generator = GeneratorParams(vocab_size, self.profile, rng,
                                         self.encoder.embedding)
        self.guider = GuiderParams(self.profile, rng, num_labels=style_labels)
        self.discriminator = DiscriminatorParams(vocab_size, self.profile, rng)
        self.feature_norm = 1.0
        self.pretrained = False

    def generator_tensors(self):
        return self.encoder.tensors() + self.generator.tensors()

    def all_tensors(self):
        return (self.generator_tensors() + self.guider.tensors()
                + self.discriminator.tensors())

    def clone(self):
        """Independent copy for paired runs; embedding sharing is preserved
        because deepcopy memoizes the shared tensor."""
        for _, t in self.all_tensors():
            t.zero_grad()
        return copy.deepcopy(self)


class Optimizers:
    def __init__(self, models, config):
        frozen = {"encoder.embedding": [PAD]}
        self.generator = Adam(models.generator_tensors(),
                              lr=config.lr_generator, frozen_rows=frozen)
        self.guider = Adam(models.guider.tensors(), lr=config.lr_guider)
        self.discriminator = Adam(models.discriminator.tensors(),
                                  lr=config.lr_discriminator,
                                  frozen_rows={"discriminator.embedding": [PAD]})

    def zero_all(self):
        self.generator.zero_grad()
        self.guider.zero_grad()
        self.discriminator.zero_grad()


def _check_finite(loss):
    val = loss.item()
    if not math.isfinite(val):
        raise TrainingDiverged("loss became %r" % (val,))
    return val


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def prefix_features_by_step(batch, enc):
    """Constant (B, F) features of every [BOS]+prefix, for t = 0..T_max."""
    t_max = max(len(s) for s in batch)
    full_rows = pad_rows([[BOS] + list(s) for s in batch], enc.profile.pad_width)
    feats = []
    rows_t = np.full_like(full_rows, PAD)
    for t in range(t_max + 1):
        rows_t[:, : t + 1] = full_rows[:, : t + 1]
        feats.append(encode_batch(rows_t, enc, stop_gradient=True))
    return feats


def _guider_phase(sentences, models, optimizer, config, epoch):
    rng = stream_rng(config.seed, "guider_batch", epoch)
    losses = []
    for idx in _batches(len(sentences), config.batch_size, rng):
        batch = [sentences[i] for i in idx]
        feats = prefix_features_by_step(batch, models.encoder)
        lengths = np.array([len(s) for s in batch])
        if lengths.max() < config.c:
            continue
        with ad.no_grad():
            init_hidden = initial_hidden(feats[-1], models.generator)
        with ad.tape():
            loss = guider_loss_batch(feats, lengths, config.c, models.guider,
                                     initial_state(init_hidden.detach()))
            ad.backward(loss)
        losses.append(_check_finite(loss))
        optimizer.guider.step()
        optimizer.zero_all()
    return float(np.mean(losses)) if losses else float("nan")


def validation_mle_loss(sentences, models, batch_size=64):
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(sentences), batch_size):
            chunk = sentences[i:i + batch_size]
            n_tokens = sum(len(s) for s in chunk)
            total += mle_loss(chunk, models.encoder, models.generator,
                              models.guider).item() * n_tokens
            count += n_tokens
    return total / count


def pretrain_mle(train_sentences, val_sentences, models, config,
                 optimizers=None, start_epoch=0, epochs=None,
                 include_guider=True, log=None):
    """Alternate generator MLE passes and guider dual-cosine passes.

    Returns the per-epoch history. Deterministic: batch order comes from
    per-epoch seed streams, so continuing a run reproduces it exactly.
    """
    if not train_sentences:
        raise ContractError("empty training corpus")
    optimizers = optimizers or Optimizers(models, config)
    epochs = config.mle_epochs if epochs is None else epochs
    history = []
    for i in range(epochs):
        epoch = start_epoch + i
        rng = stream_rng(config.seed, "mle_batch", epoch)
        gen_losses = []
        for idx in _batches(len(train_sentences), config.batch_size, rng):
            batch = [train_sentences[i] for i in idx]
            with ad.tape():
                loss = mle_loss(batch, models.encoder, models.generator,
                                models.guider)
                ad.backward(loss)
            gen_losses.append(_check_finite(loss))
            optimizers.generator.step()
            optimizers.zero_all()
        guider_loss_val = None
        if include_guider:
            guider_loss_val = _guider_phase(train_sentences, models,
                                            optimizers, config, epoch)
        entry = {"epoch": epoch,
                 "train_loss": float(np.mean(gen_losses)),
                 "guider_loss": guider_loss_val,
                 "val_loss": validation_mle_loss(val_sentences, models)}
        history.append(entry)
        if log is not None:
            log.write(json.dumps({"stage": "mle", **entry}) + "\n")
    if include_guider:
        for j in range(config.guider_extra_epochs):
            _guider_phase(train_sentences, models, optimizers, config,
                          start_epoch + epochs + j)
    models.feature_norm = mean_feature_norm(train_sentences, models.encoder)
    models.pretrained = True
    return history


# ---------------------------------------------------------------------------
# policy gradient
# ---------------------------------------------------------------------------

def rollout_traces(init_sentences, models, rng, max_len=None):
    """Sample one trace per initial sentence (training-mode initial states)."""
    rows = pad_rows([[BOS] + list(s) for s in init_sentences],
                    models.profile.pad_width)
    init_feats = encode_batch(rows, models.encoder, stop_gradient=True).values
    traces = []
    for i in range(len(init_sentences)):
        traces.append(sample_sequence(init_feats[i], models.generator,
                                      models.guider, models.encoder,
                                      rng=rng, max_len=max_len))
    return traces


def sample_from_noise(models, n, seed, mode="sample"):
    """Testing-mode sampling: initial states are scaled nonnegative noise."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    sentences = []
    for _ in range(n):
        noise = draw_initial_noise(rng, models.profile.feature_dim,
                                   scale=models.feature_norm)
        trace = sample_sequence(noise, models.generator, models.guider,
                                models.encoder, rng=rng, mode=mode)
        sentences.append(trace.sentence(models.profile.max_len))
    return sentences


def policy_gradient_step(traces, reward_traces, models, optimizers,
                         advantages=None, mle_batch=None, lam=1.0):
    """One generator update from sampled traces and their rewards.

    The surrogate is -sum_t adv[t] * log p(y_t), averaged over traces, mixed
    with the MLE loss as (1-lam)*MLE + lam*PG when an MLE batch is supplied.
    A batch whose advantages are all exactly zero (and no MLE part) is a
    guaranteed no-op. Only generator-side parameters move.
    """
    if len(traces) != len(reward_traces):
        raise ContractError("traces and reward traces disagree in length")
    if advantages is None:
        advantages = [rt.q for rt in reward_traces]
    for trace, adv in zip(traces, advantages):
        if len(adv) != trace.length:
            raise ContractError("advantage length does not match trace")
    flat_max = max((float(np.abs(a).max()) for a in advantages
                    if len(a)), default=0.0)
    if flat_max == 0.0 and mle_batch is None:
        return {"pg_loss": 0.0, "skipped": True}

    n = len(traces)
    t_max = max(t.length for t in traces)
    weights = np.zeros((n, t_max))
    for i, (trace, adv) in enumerate(zip(traces, advantages)):
        weights[i, : trace.length] = adv
    token_batch = [t.tokens for t in traces]
    init_feats = ad.constant(np.stack([t.init_feature for t in traces]))
    total_steps = sum(t.length for t in traces)

    stats = {}
    with ad.tape():
        logp_mat, _, _ = teacher_forced_log_probs(
            token_batch, models.encoder, models.generator, models.guider,
            init_features=init_feats)
        # per-token normalization keeps the gradient scale commensurate with
        # the MLE term it is blended with
        pg = ad.scale(ad.tsum(ad.mul(logp_mat, ad.constant(weights))),
                      -1.0 / total_steps)
        stats["pg_loss"] = pg.item()
        if mle_batch is not None and lam < 1.0:
            mle = mle_loss(mle_batch, models.encoder, models.generator,
                           models.guider)
            stats["mle_loss"] = mle.item()
            total = ad.add(ad.scale(mle, 1.0 - lam), ad.scale(pg, lam))
        else:
            total = pg
        ad.backward(total)
    _check_finite(total)
    assert all(t.grad is None or not t.grad.any()
               for _, t in models.guider.tensors()), "guider must stay frozen"
    optimizers.generator.step()
    optimizers.zero_all()
    stats["skipped"] = False
    return stats


# ---------------------------------------------------------------------------
# adversarial loop
# ---------------------------------------------------------------------------

def _mix_value(config, epoch_index):
    if config.rl_mix != "ramp":
        return float(config.rl_mix)
    half = max(1, config.rl_epochs // 2)
    return min(1.0, epoch_index / half)


def run_gmgan(train_sentences, val_sentences, models, config,
              optimizers=None, evaluator=None, log=None,
              checkpoint_fn=None):
    """Adversarial fine-tuning: per epoch one corpus sweep of generator
    updates (MLE blended with policy gradient by the ramp schedule), then
    discriminator steps on fresh fake samples; metrics recorded per epoch.
    """
    if not models.pretrained:
        raise ContractError("run_gmgan requires a pretrained model")
    optimizers = optimizers or Optimizers(models, config)
    baseline = RewardBaseline(config.baseline_momentum) if config.baseline else None
    history = []
    for j in range(1, config.rl_epochs + 1):
        epoch = config.mle_epochs + j - 1
        lam = _mix_value(config, j - 1)
        rng_batches = stream_rng(config.seed, "mle_batch", epoch)
        rng_roll = stream_rng(config.seed, "rollout", epoch)
        rng_disc = stream_rng(config.seed, "disc", epoch)
        warm_baseline = (lam == 0.0 and config.rl_mix == "ramp"
                         and baseline is not None)
        gen_stats = []
        for idx in _batches(len(train_sentences), config.batch_size,
                            rng_batches):
            batch = [train_sentences[i] for i in idx]
            if lam == 0.0:
                with ad.tape():
                    loss = mle_loss(batch, models.encoder, models.generator,
                                    models.guider)
                    ad.backward(loss)
                _check_finite(loss)
                optimizers.generator.step()
                optimizers.zero_all()
                gen_stats.append({"mle_loss": loss.item(), "pg_loss": 0.0})
                if warm_baseline:
                    # pre-ramp epochs feed the EMA baseline so the first real
                    # policy updates see centered advantages
                    init_idx = rng_roll.integers(len(train_sentences),
                                                 size=config.rollout_batch)
                    traces = rollout_traces(
                        [train_sentences[k] for k in init_idx], models, rng_roll)
                    with ad.no_grad():
                        finals = score_batch(
                            [t.sentence(models.profile.max_len) for t in traces],
                            models.discriminator).values
                    baseline.advantages(
                        [compute_reward_trace(t, float(finals[k]), config.c,
                                              config.gamma,
                                              config.discount_convention,
                                              mode=config.ablation).q
                         for k, t in enumerate(traces)])
                continue
            for _ in range(config.g_steps):
                init_idx = rng_roll.integers(len(train_sentences),
                                             size=config.rollout_batch)
                inits = [train_sentences[k] for k in init_idx]
                traces = rollout_traces(inits, models, rng_roll)
                with ad.no_grad():
                    finals = score_batch(
                        [t.sentence(models.profile.max_len) for t in traces],
                        models.discriminator).values
                rtraces = [compute_reward_trace(
                    t, float(finals[k]), config.c, config.gamma,
                    config.discount_convention, mode=config.ablation)
                    for k, t in enumerate(traces)]
                advs = ([rt.q for rt in rtraces] if baseline is None
                        else baseline.advantages([rt.q for rt in rtraces]))
                stats = policy_gradient_step(
                    traces, rtraces, models, optimizers, advantages=advs,
                    mle_batch=batch if lam < 1.0 else None, lam=lam)
                stats["mean_q"] = float(np.mean([rt.q.mean() for rt in rtraces]))
                stats["mean_r_f"] = float(np.mean(finals))
                gen_stats.append(stats)
        d_losses = []
        for _ in range(config.d_steps):
            idx = rng_disc.integers(len(train_sentences),
                                    size=config.batch_size)
            real = [train_sentences[k] for k in idx]
            fake_inits = [train_sentences[k]
                          for k in rng_disc.integers(len(train_sentences),
                                                     size=config.batch_size)]
            fake = [t.sentence(models.profile.max_len)
                    for t in rollout_traces(fake_inits, models, rng_disc)]
            d_losses.append(train_step(real, fake, models.discriminator,
                                       optimizers.discriminator))
        mle_vals = [s["mle_loss"] for s in gen_stats if "mle_loss" in s]
        entry = {"epoch": epoch, "lambda": lam,
                 "mle_loss": float(np.mean(mle_vals)) if mle_vals else None,
                 "pg_loss": float(np.mean([s.get("pg_loss", 0.0)
                                           for s in gen_stats])),
                 "mean_q": float(np.mean([s["mean_q"] for s in gen_stats]))
                           if lam > 0 else None,
                 "d_loss": float(np.mean(d_losses)) if d_losses else None,
                 "val_loss": validation_mle_loss(val_sentences, models)}
        if evaluator is not None:
            entry.update(evaluator(models, epoch))
        history.append(entry)
        if log is not None:
            log.write(json.dumps({"stage": "adversarial", **entry}) + "\n")
        if checkpoint_fn is not None:
            checkpoint_fn(models, optimizers, epoch)
    return history

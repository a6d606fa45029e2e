"""LSTM guider: consumes the feature of the sentence so far and predicts the
feature c steps ahead. Trained on real sentences with a dual cosine objective
(match the future feature and the feature-changing direction); its rollouts
gate the decoder and score generated steps.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError


@dataclass
class GuiderState:
    hidden: ad.Tensor
    cell: ad.Tensor


class GuiderParams:
    """LSTM cell over features (optionally feature+label) plus an output head
    mapping hidden state back to feature space. num_labels=0 disables style
    conditioning; otherwise a learned per-label row seeds the initial hidden
    state and a one-hot label is appended to every input.
    """

    def __init__(self, profile, rng, num_labels=0):
        self.profile = profile
        self.num_labels = num_labels
        d_in = profile.feature_dim + num_labels
        h = profile.hidden_dim
        self.w_x = ad.init_matrix(rng, d_in, 4 * h)
        self.w_h = ad.init_matrix(rng, h, 4 * h)
        self.b = ad.init_vector(4 * h)
        self.head_w = ad.init_matrix(rng, h, profile.feature_dim)
        self.head_b = ad.init_vector(profile.feature_dim)
        self.label_init = None
        if num_labels:
            self.label_init = ad.init_matrix(rng, num_labels, h)

    def tensors(self):
        out = [("guider.lstm.w_x", self.w_x), ("guider.lstm.w_h", self.w_h),
               ("guider.lstm.b", self.b), ("guider.head.w", self.head_w),
               ("guider.head.b", self.head_b)]
        if self.label_init is not None:
            out.append(("guider.label_init", self.label_init))
        return out


def initial_state(hidden):
    """State seeded with a hidden vector (or batch of them) and zero cell."""
    return GuiderState(hidden, ad.constant(np.zeros(hidden.shape)))


def initial_state_for_labels(params, labels):
    """Style mode: the label's learned embedding is the initial hidden state."""
    if params.label_init is None:
        raise ContractError("guider was built without style labels")
    idx = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    hidden = ad.gather_rows(params.label_init, idx)
    if np.isscalar(labels) or np.asarray(labels).ndim == 0:
        hidden = ad.reshape(hidden, (params.profile.hidden_dim,))
    return initial_state(hidden)


def _one_hot(labels, num_labels, batch):
    oh = np.zeros((batch, num_labels))
    oh[np.arange(batch), np.asarray(labels, dtype=np.intp)] = 1.0
    return ad.constant(oh)


def guider_step(state, f, params, labels=None):
    """Advance one step on feature f; returns (predicted feature, new state).

    f is (feature_dim,) or (B, feature_dim). In style mode labels must be
    given (scalar or length-B); outside style mode they must not be.
    """
    if (labels is not None) != bool(params.num_labels):
        raise ContractError("labels are required exactly in style mode")
    single = f.values.ndim == 1
    x = ad.reshape(f, (1, -1)) if single else f
    hidden = ad.reshape(state.hidden, (1, -1)) if single else state.hidden
    cell = ad.reshape(state.cell, (1, -1)) if single else state.cell
    if x.shape[1] != params.profile.feature_dim:
        raise DimensionError("feature width %d != profile %d"
                             % (x.shape[1], params.profile.feature_dim))
    if params.num_labels:
        x = ad.concat([x, _one_hot(labels, params.num_labels, x.shape[0])], axis=1)
    new_h, new_c = ad.lstm_cell(x, hidden, cell, params.w_x, params.w_h, params.b)
    pred = ad.add(ad.matmul(new_h, params.head_w), params.head_b)
    if single:
        pred = ad.reshape(pred, (params.profile.feature_dim,))
        new_h = ad.reshape(new_h, (params.profile.hidden_dim,))
        new_c = ad.reshape(new_c, (params.profile.hidden_dim,))
    return pred, GuiderState(new_h, new_c)


def replay_predictions(features, params, init_state, labels=None):
    """Run the guider over a feature sequence; prediction i is made after
    consuming features[i] and aims at features[i + c]."""
    state = init_state
    preds = []
    for f in features:
        pred, state = guider_step(state, f, params, labels=labels)
        preds.append(pred)
    return preds


def predict_ahead(prefix_features, c, params, init_state, labels=None):
    """Replay the guider over a stored prefix and return its last prediction,
    i.e. the feature expected c steps after the end of the prefix."""
    if not prefix_features:
        raise ContractError("predict_ahead needs a non-empty prefix")
    if c < 1:
        raise ContractError("lookahead c must be >= 1")
    return replay_predictions(prefix_features, params, init_state, labels)[-1]


def matching_terms(features, predictions, c):
    """Per-position dual cosine objective: match the feature c steps ahead and
    the direction of change. Returns a list of scalar tensors, one per valid t.
    """
    if c < 1:
        raise ContractError("lookahead c must be >= 1")
    n = len(features)
    if n <= c:
        raise ContractError("need at least c+1 features, got %d" % n)
    terms = []
    for t in range(n - c):
        target, pred, anchor = features[t + c], predictions[t], features[t]
        direct = ad.cosine_similarity(target, pred)
        direction = ad.cosine_similarity(ad.sub(target, anchor),
                                         ad.sub(pred, anchor))
        terms.append(ad.add(direct, direction))
    return terms


def guider_loss(features, c, params, init_state, labels=None):
    """Negated mean dual-cosine objective over a real feature sequence.

    Features beyond position T-c have no lookahead target and contribute no
    term. Minimizing this trains the guider to predict ahead.
    """
    n = len(features)
    if c < 1:
        raise ContractError("lookahead c must be >= 1")
    if n <= c:
        raise ContractError("need at least c+1 features, got %d" % n)
    preds = replay_predictions(features[:n - c], params, init_state, labels)
    terms = matching_terms(features, preds, c)
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, -1.0 / len(terms))


def guider_loss_batch(step_features, lengths, c, params, init_state,
                      labels=None):
    """Pooled guider loss over a padded batch.

    step_features[t] is the (B, feature_dim) feature of every sequence's
    length-t prefix; sequence b contributes terms for t with t + c <= lengths[b].
    Equivalent to the per-sequence loss weighted by term counts.
    """
    if c < 1:
        raise ContractError("lookahead c must be >= 1")
    lengths = np.asarray(lengths)
    t_top = int(lengths.max()) - c
    if t_top < 0:
        raise ContractError("no sequence is longer than the lookahead")
    state = init_state
    total = None
    count = 0
    for t in range(t_top + 1):
        pred, state = guider_step(state, step_features[t], params, labels=labels)
        mask = (lengths >= t + c).astype(np.float64)
        n_valid = int(mask.sum())
        if n_valid == 0:
            break
        target, anchor = step_features[t + c], step_features[t]
        direct = ad.row_cosine(target, pred)
        direction = ad.row_cosine(ad.sub(target, anchor), ad.sub(pred, anchor))
        term = ad.tsum(ad.mul(ad.add(direct, direction), ad.constant(mask)))
        total = term if total is None else ad.add(total, term)
        count += n_valid
    return ad.scale(total, -1.0 / count)


def objective_cosines(features, params, init_state, c, labels=None):
    """Mean of each cosine term separately (diagnostics / acceptance)."""
    preds = replay_predictions(features, params, init_state, labels)
    n = len(features)
    direct, direction = [], []
    with ad.no_grad():
        for t in range(n - c):
            target, pred, anchor = features[t + c], preds[t], features[t]
            direct.append(ad.cosine_similarity(target, pred).item())
            direction.append(ad.cosine_similarity(
                ad.sub(target, anchor), ad.sub(pred, anchor)).item())
    return float(np.mean(direct)), float(np.mean(direction))

"""Guider-matched adversarial text generation at desk scale.

An LSTM generator whose next-token choice is gated by a guider network that
predicts sentence features several steps ahead; trained with MLE pretraining
followed by policy-gradient fine-tuning on feature-matching intermediate
rewards combined with a discriminator's final reward. Everything, including
the reverse-mode autodiff underneath, is built from scratch on numpy.
"""

__version__ = "0.1.0"

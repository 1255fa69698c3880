"""Quality-aware hypersphere embeddings at desk scale.

A margin-softmax classifier over L2-normalized features with an explicit
per-sample quality branch, a three-step freeze/retrain pipeline,
quality-weighted feature aggregation (batch and streaming) and a
verification/identification metrics harness. Real datasets are replaced by a
seeded synthetic generator whose per-sample corruption is the ground-truth
inverse quality, so every claim is testable by construction.
"""

__version__ = "0.1.0"

from . import aggregate, errors, evaluation, linalg, loss, model, synthgen, trainer

__all__ = ["aggregate", "errors", "evaluation", "linalg", "loss", "model",
           "synthgen", "trainer", "__version__"]

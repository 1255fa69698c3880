"""Synthetic dataset generator with per-sample ground-truth corruption.

Each class gets a "true" embedding (prototype) drawn uniformly on the unit
sphere. A sample is the prototype corrupted by isotropic Gaussian noise of
scale sigma, renormalized, then lifted to a higher-dimensional input space
through a fixed random linear map plus small observation noise. The injected
sigma is recorded per sample, so a learned quality score has a verifiable
target: low-sigma samples should score higher than high-sigma ones.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientData, InvalidConfig
from .linalg import l2_normalize

OBS_NOISE = 0.01  # input-space observation noise scale


@dataclass(frozen=True)
class GenConfig:
    """Dataset shape: classes, samples, dimensions and the noise mixture.

    noise_levels is a sequence of (sigma, fraction) pairs; fractions must sum
    to 1. Quality is only learnable when at least two distinct sigmas are
    present and low-sigma samples outnumber high-sigma ones.
    """

    n_classes: int
    samples_per_class: int
    d_in: int = 32
    d: int = 16
    noise_levels: tuple = ((0.1, 0.7), (1.0, 0.3))
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise InvalidConfig("n_classes must be >= 2")
        if self.samples_per_class < 1:
            raise InvalidConfig("samples_per_class must be >= 1")
        if self.d_in < 1 or self.d < 1:
            raise InvalidConfig("dimensions must be positive")
        if not self.noise_levels:
            raise InvalidConfig("noise_levels must be nonempty")
        fracs = []
        for item in self.noise_levels:
            sigma, frac = item
            if sigma < 0:
                raise InvalidConfig(f"sigma must be >= 0, got {sigma}")
            if not 0.0 <= frac <= 1.0:
                raise InvalidConfig(f"fraction must be in [0,1], got {frac}")
            fracs.append(frac)
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise InvalidConfig(f"fractions sum to {sum(fracs)!r}, expected 1")
        if self.seed < 0:
            raise InvalidConfig("seed must be a non-negative integer")

    @property
    def quality_learnable(self) -> bool:
        """True when the mixture has >= 2 distinct sigmas (branch has a target)."""
        return len({sigma for sigma, _ in self.noise_levels}) >= 2


@dataclass
class EmbeddingSample:
    """One labeled input vector with its injected corruption scale.

    f_true is the generator-side embedding before lifting; it is diagnostic
    ground truth and is not part of the CSV schema.
    """

    x: np.ndarray
    label: int
    sigma_gt: float
    sample_id: int
    f_true: np.ndarray | None = field(default=None, repr=False)


def _level_counts(noise_levels, samples_per_class) -> list[int]:
    """Per-class sample count for each noise level, largest-remainder rounding."""
    exact = [frac * samples_per_class for _, frac in noise_levels]
    counts = [int(np.floor(e)) for e in exact]
    short = samples_per_class - sum(counts)
    remainders = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in remainders[:short]:
        counts[i] += 1
    return counts


def generate(cfg: GenConfig):
    """Build the dataset. Returns (samples, prototypes).

    Fully determined by cfg.seed: the lifting matrix is drawn first, then the
    class prototypes, then per-sample noise in a fixed order.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    lift = rng.standard_normal((cfg.d_in, cfg.d))
    protos = rng.standard_normal((cfg.n_classes, cfg.d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    counts = _level_counts(cfg.noise_levels, cfg.samples_per_class)
    samples = []
    sid = 0
    for label in range(cfg.n_classes):
        for (sigma, _), count in zip(cfg.noise_levels, counts):
            for _ in range(count):
                g = rng.standard_normal(cfg.d)
                f_true = l2_normalize(protos[label] + sigma * g)
                obs = rng.standard_normal(cfg.d_in)
                x = lift @ f_true + OBS_NOISE * obs
                samples.append(
                    EmbeddingSample(x=x, label=label, sigma_gt=float(sigma),
                                    sample_id=sid, f_true=f_true)
                )
                sid += 1
    return samples, [protos[i] for i in range(cfg.n_classes)]


def split_reference_query(samples, n_ref_ids, n_ref_per_id, n_query_per_id,
                          n_disturb_ids, seed):
    """Split into a reference gallery and a query set.

    Reference: n_ref_ids identities with n_ref_per_id samples each. Query:
    n_query_per_id further samples of every reference identity (disjoint from
    the reference samples) plus n_query_per_id samples from each of
    n_disturb_ids identities that never appear in the reference.
    """
    by_label: dict[int, list[EmbeddingSample]] = {}
    for s in samples:
        by_label.setdefault(s.label, []).append(s)
    labels = sorted(by_label)

    if len(labels) < n_ref_ids + n_disturb_ids:
        raise InsufficientData(
            f"need {n_ref_ids + n_disturb_ids} identities, dataset has {len(labels)}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    ref_ids = [labels[i] for i in order[:n_ref_ids]]
    disturb_ids = [labels[i] for i in order[n_ref_ids:n_ref_ids + n_disturb_ids]]

    reference, query = [], []
    for label in ref_ids:
        pool = by_label[label]
        need = n_ref_per_id + n_query_per_id
        if len(pool) < need:
            raise InsufficientData(
                f"identity {label} has {len(pool)} samples, split needs {need}")
        pick = rng.choice(len(pool), size=need, replace=False)
        reference.extend(pool[i] for i in pick[:n_ref_per_id])
        query.extend(pool[i] for i in pick[n_ref_per_id:])
    for label in disturb_ids:
        pool = by_label[label]
        if len(pool) < n_query_per_id:
            raise InsufficientData(
                f"identity {label} has {len(pool)} samples, split needs {n_query_per_id}")
        pick = rng.choice(len(pool), size=n_query_per_id, replace=False)
        query.extend(pool[i] for i in pick)
    return reference, query


def save_dataset_csv(samples, path) -> None:
    """Write `sample_id,label,sigma_gt,x_0,...` with a header row (UTF-8)."""
    if not samples:
        raise InsufficientData("nothing to write")
    d_in = samples[0].x.shape[0]
    header = "sample_id,label,sigma_gt," + ",".join(f"x_{i}" for i in range(d_in))
    lines = [header]
    for s in samples:
        vals = ",".join(f"{v:.17g}" for v in s.x)
        lines.append(f"{s.sample_id},{s.label},{s.sigma_gt:.17g},{vals}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset_csv(path) -> list[EmbeddingSample]:
    """Read a dataset written by save_dataset_csv."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if cols[:3] != ["sample_id", "label", "sigma_gt"]:
            raise InvalidConfig(f"unexpected dataset header: {header!r}")
        samples = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            samples.append(EmbeddingSample(
                x=np.array([float(v) for v in parts[3:]], dtype=np.float64),
                label=int(parts[1]),
                sigma_gt=float(parts[2]),
                sample_id=int(parts[0]),
            ))
    return samples

"""Quality-weighted feature aggregation: batch, filtered, and streaming.

Batch fusion takes the quality-weighted mean of unit features and
renormalizes. The filtered variant drops low-quality records when the
template's mean quality is high enough, otherwise it falls back to the plain
mean. The progressive variant fuses a stream one record at a time, gated by
a similarity threshold against the running template and a quality threshold.

The streaming state keeps the UNNORMALIZED weighted sum internally and
normalizes only on read-out; this makes the stream fold exactly equal to the
batch formula (and order-invariant) whenever the gates are disabled.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (EmptyInput, InvalidConfig, InvalidQuality, ZeroQualityMass,
                     ZeroVector)
from .linalg import dot

QUALITY_MASS_GUARD = 1e-12


@dataclass
class FeatureRecord:
    """Unit-norm feature with its quality score and identity."""

    f: np.ndarray
    s: float
    identity: int
    order: int = 0

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64)
        norm = float(np.linalg.norm(self.f))
        if abs(norm - 1.0) > 1e-9:
            raise ZeroVector(f"feature norm {norm!r} is not 1 within 1e-9")
        if not 0.0 < self.s < 1.0:
            raise InvalidQuality(f"quality {self.s!r} outside (0, 1)")


@dataclass
class AggregateState:
    """Running fusion state for one stream.

    weighted_sum is the raw accumulator sum(s_j * f_j) over accepted records;
    `feature` exposes its unit-norm read-out, which is also what the
    similarity gate compares against.
    """

    weighted_sum: np.ndarray
    s_sum: float
    f_th: float
    s_th: float
    count_accepted: int = 1

    @property
    def feature(self) -> np.ndarray:
        norm = float(np.linalg.norm(self.weighted_sum))
        if norm <= QUALITY_MASS_GUARD:
            raise ZeroVector("accumulated feature has zero norm")
        return self.weighted_sum / norm


def qwfa(records) -> np.ndarray:
    """Quality-weighted mean of unit features, L2-normalized."""
    if not records:
        raise EmptyInput("no records to aggregate")
    s = np.array([r.s for r in records])
    mass = float(s.sum())
    if mass <= QUALITY_MASS_GUARD:
        raise ZeroQualityMass(f"total quality mass {mass!r} underflowed")
    F = np.stack([r.f for r in records])
    fused = (s[:, None] * F).sum(axis=0) / mass
    return fused / np.linalg.norm(fused)


def qwfaf(records, s_th: float) -> np.ndarray:
    """Filtered fusion: weight records with s >= s_th when the mean quality
    reaches s_th, otherwise fall back to the plain unweighted mean."""
    if not records:
        raise EmptyInput("no records to aggregate")
    s = np.array([r.s for r in records])
    if s.mean() >= s_th:
        return qwfa([r for r in records if r.s >= s_th])
    F = np.stack([r.f for r in records])
    fused = F.mean(axis=0)
    return fused / np.linalg.norm(fused)


def progressive_init(first: FeatureRecord, f_th: float, s_th: float) -> AggregateState:
    """Seed the stream state from the first record, unconditionally."""
    return AggregateState(weighted_sum=first.s * first.f, s_sum=first.s,
                          f_th=f_th, s_th=s_th, count_accepted=1)


def progressive_update(state: AggregateState, rec: FeatureRecord) -> AggregateState:
    """Fold one record into the stream if it passes both gates (strict >).

    Accept when cos(current template, f) > f_th and s > s_th; otherwise the
    state is returned unchanged. Pure transition: accepted updates return a
    new state object.
    """
    if not (dot(state.feature, rec.f) > state.f_th and rec.s > state.s_th):
        return state
    return AggregateState(
        weighted_sum=state.weighted_sum + rec.s * rec.f,
        s_sum=state.s_sum + rec.s,
        f_th=state.f_th,
        s_th=state.s_th,
        count_accepted=state.count_accepted + 1,
    )


def progressive_aggregate(records, f_th: float, s_th: float) -> np.ndarray:
    """Run the whole stream in record order and read out the fused feature."""
    if not records:
        raise EmptyInput("no records to aggregate")
    state = progressive_init(records[0], f_th, s_th)
    for rec in records[1:]:
        state = progressive_update(state, rec)
    return state.feature


# --- feature file I/O -------------------------------------------------------

def save_features_csv(records, path) -> None:
    """Write `identity,order,s,f_0,...` with a header row."""
    if not records:
        raise EmptyInput("no records to write")
    d = records[0].f.shape[0]
    header = "identity,order,s," + ",".join(f"f_{i}" for i in range(d))
    lines = [header]
    for r in records:
        vals = ",".join(f"{v:.17g}" for v in r.f)
        lines.append(f"{r.identity},{r.order},{r.s:.17g},{vals}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_features_csv(path) -> list[FeatureRecord]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if cols[:3] != ["identity", "order", "s"]:
            raise InvalidConfig(f"unexpected feature header: {header!r}")
        records = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            records.append(FeatureRecord(
                f=np.array([float(v) for v in parts[3:]], dtype=np.float64),
                s=float(parts[2]),
                identity=int(parts[0]),
                order=int(parts[1]),
            ))
    return records

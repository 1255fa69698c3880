#!/usr/bin/env python3
"""Show how the three fusion rules behave on one noisy frame stream.

A stream of unit features drifts around a true identity direction; some
frames are badly corrupted. Batch fusion weights frames by quality, the
filtered variant drops low-quality frames outright, and the progressive rule
folds frames in one at a time, gated by similarity to the running template
and by quality. With both gates disabled the stream fold reproduces the
batch result exactly.

Run: python3 demos/streaming_fusion.py
"""

import numpy as np

from eqface.aggregate import (FeatureRecord, progressive_aggregate,
                              progressive_init, progressive_update, qwfa, qwfaf)

rng = np.random.default_rng(11)
D = 16

true_direction = rng.standard_normal(D)
true_direction /= np.linalg.norm(true_direction)


def frame(sigma):
    """One observed frame: the identity direction plus isotropic noise."""
    v = true_direction + sigma * rng.standard_normal(D)
    return v / np.linalg.norm(v)


# a 12-frame stream: mostly decent frames, three junk ones in the middle
sigmas = [0.2, 0.2, 0.3, 1.5, 1.5, 0.2, 0.3, 1.5, 0.2, 0.3, 0.2, 0.2]
# pretend the quality branch is decent but imperfect: s tracks 1/(1+sigma)
records = []
for i, sg in enumerate(sigmas):
    s = float(np.clip(1.0 / (1.0 + sg) + rng.normal(0, 0.03), 0.05, 0.95))
    records.append(FeatureRecord(f=frame(sg), s=s, identity=0, order=i))

print("frame qualities:", " ".join(f"{r.s:.2f}" for r in records))


def alignment(v):
    return float(v @ true_direction)


# ----------------------------------------------------------------------------
# batch rules
# ----------------------------------------------------------------------------
plain_mean = np.mean([r.f for r in records], axis=0)
plain_mean /= np.linalg.norm(plain_mean)
print(f"plain mean        alignment {alignment(plain_mean):.4f}")
print(f"qwfa              alignment {alignment(qwfa(records)):.4f}")
for s_th in (0.3, 0.5):
    print(f"qwfaf s_th={s_th}    alignment {alignment(qwfaf(records, s_th)):.4f}")

# ----------------------------------------------------------------------------
# progressive: watch the template evolve frame by frame
# ----------------------------------------------------------------------------
state = progressive_init(records[0], f_th=0.5, s_th=0.3)
print("\nprogressive with f_th=0.5, s_th=0.3:")
print(f"  frame  0: seeded, alignment {alignment(state.feature):.4f}")
for rec in records[1:]:
    new_state = progressive_update(state, rec)
    verdict = "accepted" if new_state is not state else "rejected"
    state = new_state
    print(f"  frame {rec.order:2d}: s={rec.s:.2f} {verdict}, "
          f"alignment {alignment(state.feature):.4f}")
print(f"accepted {state.count_accepted}/{len(records)} frames")

# ----------------------------------------------------------------------------
# with both gates disabled the stream fold equals the batch formula
# ----------------------------------------------------------------------------
open_gates = progressive_aggregate(records, f_th=-1.0, s_th=0.0)
diff = np.max(np.abs(open_gates - qwfa(records)))
print(f"\ngates disabled: max |progressive - batch| = {diff:.2e}")

"""Two-branch network: MLP backbone -> unit feature, plus a small quality head.

The backbone maps the input to a d-dimensional feature which is L2-normalized
for classification. The quality branch taps the PRE-normalization feature
(magnitude carries corruption information) and runs FC -> BN -> ReLU -> FC ->
sigmoid to produce a score s in (0,1). Components can be frozen individually;
a frozen component receives no updates of any kind, including BN running
statistics.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ZeroVector

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running = momentum * running + (1 - momentum) * batch
NORM_GUARD = 1e-12
COMPONENTS = ("backbone", "quality", "classifier")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)


@dataclass
class BackboneParams:
    """Dense layers with ReLU between all but the last."""
    layers: list[DenseLayer]


@dataclass
class QualityBranchParams:
    fc1_w: np.ndarray        # (q, d)
    fc1_b: np.ndarray        # (q,)
    gamma: np.ndarray        # (q,)
    beta: np.ndarray         # (q,)
    running_mean: np.ndarray # (q,)
    running_var: np.ndarray  # (q,)
    fc2_w: np.ndarray        # (1, q)
    fc2_b: np.ndarray        # (1,)
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS


@dataclass
class ClassifierParams:
    """Weight matrix (d, n); columns are renormalized to unit norm at use time."""
    w: np.ndarray


@dataclass
class ModelParams:
    backbone: BackboneParams
    quality: QualityBranchParams
    classifier: ClassifierParams
    frozen: set = field(default_factory=set)

    def freeze(self, *components: str) -> None:
        for c in components:
            if c not in COMPONENTS:
                raise ValueError(f"unknown component {c!r}")
            self.frozen.add(c)

    def unfreeze(self, *components: str) -> None:
        for c in components:
            if c not in COMPONENTS:
                raise ValueError(f"unknown component {c!r}")
            self.frozen.discard(c)

    def named_tensors(self):
        """Yield (name, component, array) in a fixed canonical order."""
        for i, layer in enumerate(self.backbone.layers):
            yield f"backbone.layer{i}.weight", "backbone", layer.weight
            yield f"backbone.layer{i}.bias", "backbone", layer.bias
        q = self.quality
        yield "quality.fc1.weight", "quality", q.fc1_w
        yield "quality.fc1.bias", "quality", q.fc1_b
        yield "quality.bn.gamma", "quality", q.gamma
        yield "quality.bn.beta", "quality", q.beta
        yield "quality.bn.running_mean", "quality", q.running_mean
        yield "quality.bn.running_var", "quality", q.running_var
        yield "quality.fc2.weight", "quality", q.fc2_w
        yield "quality.fc2.bias", "quality", q.fc2_b
        yield "classifier.weight", "classifier", self.classifier.w

    def tensor_dict(self) -> dict:
        return {name: arr for name, _, arr in self.named_tensors()}

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        current = self.tensor_dict()[name]
        if current.shape != value.shape:
            raise ValueError(f"shape mismatch for {name}: {current.shape} vs {value.shape}")
        current[...] = value

    def copy(self) -> "ModelParams":
        return ModelParams(
            backbone=BackboneParams(
                [DenseLayer(l.weight.copy(), l.bias.copy()) for l in self.backbone.layers]),
            quality=QualityBranchParams(
                fc1_w=self.quality.fc1_w.copy(), fc1_b=self.quality.fc1_b.copy(),
                gamma=self.quality.gamma.copy(), beta=self.quality.beta.copy(),
                running_mean=self.quality.running_mean.copy(),
                running_var=self.quality.running_var.copy(),
                fc2_w=self.quality.fc2_w.copy(), fc2_b=self.quality.fc2_b.copy(),
                momentum=self.quality.momentum, eps=self.quality.eps),
            classifier=ClassifierParams(self.classifier.w.copy()),
            frozen=set(self.frozen),
        )

    @property
    def d(self) -> int:
        return self.backbone.layers[-1].weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.backbone.layers[0].weight.shape[1]

    @property
    def n_classes(self) -> int:
        return self.classifier.w.shape[1]


@dataclass
class ForwardResult:
    """Batched forward outputs; arrays keep a leading batch dimension.

    s is None when the quality branch was skipped. cache holds the
    intermediates backward_through_model needs.
    """

    f_raw: np.ndarray        # (B, d)
    f: np.ndarray            # (B, d)
    s: np.ndarray | None     # (B,)
    cache: dict | None = field(default=None, repr=False)


def init_params(d_in: int, hidden: int, d: int, n_classes: int, seed,
                quality_hidden: int | None = None) -> ModelParams:
    """Seeded init: Gaussian weights scaled by 1/sqrt(fan_in), zero biases,
    BN at identity, classifier columns normalized."""
    rng = np.random.default_rng(seed)
    q = quality_hidden if quality_hidden else max(1, d // 4)

    layers = []
    for fan_in, fan_out in ((d_in, hidden), (hidden, d)):
        w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        layers.append(DenseLayer(weight=w, bias=np.zeros(fan_out)))

    quality = QualityBranchParams(
        fc1_w=rng.standard_normal((q, d)) / np.sqrt(d),
        fc1_b=np.zeros(q),
        gamma=np.ones(q),
        beta=np.zeros(q),
        running_mean=np.zeros(q),
        running_var=np.ones(q),
        fc2_w=rng.standard_normal((1, q)) / np.sqrt(q),
        fc2_b=np.zeros(1),
    )

    w_cls = rng.standard_normal((d, n_classes))
    w_cls /= np.linalg.norm(w_cls, axis=0, keepdims=True)
    return ModelParams(BackboneParams(layers), quality, ClassifierParams(w_cls))


def normalized_classifier(params: ModelParams) -> np.ndarray:
    """Classifier weight with unit-norm columns (stored weight untouched)."""
    w = params.classifier.w
    return w / np.linalg.norm(w, axis=0, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(params: ModelParams, x, mode: str = "eval",
            with_quality: bool = True) -> ForwardResult:
    """Run backbone (and optionally the quality branch) on x.

    x may be a single vector or a (B, d_in) batch; outputs always carry the
    batch dimension. In train mode the branch BN uses batch statistics and
    updates the running statistics unless the quality component is frozen;
    in eval mode it uses the stored running statistics and mutates nothing.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]

    pre_acts, acts = [], [X]
    a = X
    last = len(params.backbone.layers) - 1
    for i, layer in enumerate(params.backbone.layers):
        z = a @ layer.weight.T + layer.bias
        pre_acts.append(z)
        a = np.maximum(z, 0.0) if i < last else z
        acts.append(a)
    f_raw = a

    raw_norm = np.linalg.norm(f_raw, axis=1)
    if np.any(raw_norm <= NORM_GUARD):
        raise ZeroVector("backbone output collapsed to zero norm")
    f = f_raw / raw_norm[:, None]

    cache = {"mode": mode, "acts": acts, "pre_acts": pre_acts, "raw_norm": raw_norm}
    s = None
    if with_quality:
        s, branch_cache = _quality_forward(
            params.quality, f_raw, train=(mode == "train"),
            update_stats=(mode == "train" and "quality" not in params.frozen))
        cache["branch"] = branch_cache
    return ForwardResult(f_raw=f_raw, f=f, s=s, cache=cache)


def _quality_forward(q: QualityBranchParams, f_raw, train: bool, update_stats: bool):
    z1 = f_raw @ q.fc1_w.T + q.fc1_b
    if train:
        mean = z1.mean(axis=0)
        var = z1.var(axis=0)  # population variance, matching the backward pass
    else:
        mean = q.running_mean
        var = q.running_var
    inv_std = 1.0 / np.sqrt(var + q.eps)
    x_hat = (z1 - mean) * inv_std
    bn_out = q.gamma * x_hat + q.beta
    if train and update_stats:
        q.running_mean[...] = q.momentum * q.running_mean + (1 - q.momentum) * mean
        q.running_var[...] = q.momentum * q.running_var + (1 - q.momentum) * var
    q_act = np.maximum(bn_out, 0.0)
    logit = q_act @ q.fc2_w[0] + q.fc2_b[0]
    # sigmoid is mathematically in (0,1); the clip only guards float saturation
    s = np.clip(_sigmoid(logit), 1e-12, 1.0 - 1e-12)
    cache = {"z1": z1, "x_hat": x_hat, "inv_std": inv_std, "bn_out": bn_out,
             "q_act": q_act, "s": s, "train": train}
    return s, cache


# --- checkpoint I/O -------------------------------------------------------
# Text manifest: version line, meta lines, then one block per tensor with a
# header `tensor <name> role=<component> frozen=<0|1> shape=<d0xd1...>` and
# the values in decimal (17 significant digits round-trips float64 exactly).

CKPT_VERSION = "EQFACE-CKPT v1"


def _fmt(values) -> str:
    return " ".join(f"{v:.17g}" for v in values)


def save_checkpoint(params: ModelParams, path) -> None:
    lines = [CKPT_VERSION,
             f"meta quality.momentum {params.quality.momentum:.17g}",
             f"meta quality.eps {params.quality.eps:.17g}"]
    for name, component, arr in params.named_tensors():
        frozen = 1 if component in params.frozen else 0
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} role={component} frozen={frozen} shape={shape}")
        if arr.ndim == 1:
            lines.append(_fmt(arr))
        else:
            lines.extend(_fmt(row) for row in arr)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CKPT_VERSION:
        raise CheckpointError(f"expected version line {CKPT_VERSION!r}")

    meta = {}
    tensors = {}
    frozen = set()
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("meta "):
            _, key, value = line.split(" ", 2)
            meta[key] = float(value)
            i += 1
            continue
        if not line.startswith("tensor "):
            raise CheckpointError(f"unexpected line {i + 1}: {line!r}")
        try:
            _, name, role_s, frozen_s, shape_s = line.split(" ")
            role = role_s.removeprefix("role=")
            is_frozen = frozen_s.removeprefix("frozen=") == "1"
            shape = tuple(int(d) for d in shape_s.removeprefix("shape=").split("x"))
        except ValueError as exc:
            raise CheckpointError(f"bad tensor header at line {i + 1}: {line!r}") from exc
        n_rows = 1 if len(shape) == 1 else shape[0]
        rows = []
        for r in range(n_rows):
            rows.append([float(v) for v in lines[i + 1 + r].split()])
        arr = np.array(rows, dtype=np.float64)
        arr = arr.reshape(shape)
        tensors[name] = arr
        if is_frozen:
            frozen.add(role)
        i += 1 + n_rows

    layer_ids = sorted({int(name.split(".")[1][5:]) for name in tensors
                        if name.startswith("backbone.layer")})
    if not layer_ids:
        raise CheckpointError("checkpoint has no backbone layers")
    layers = [DenseLayer(weight=tensors[f"backbone.layer{i}.weight"],
                         bias=tensors[f"backbone.layer{i}.bias"]) for i in layer_ids]
    try:
        quality = QualityBranchParams(
            fc1_w=tensors["quality.fc1.weight"], fc1_b=tensors["quality.fc1.bias"],
            gamma=tensors["quality.bn.gamma"], beta=tensors["quality.bn.beta"],
            running_mean=tensors["quality.bn.running_mean"],
            running_var=tensors["quality.bn.running_var"],
            fc2_w=tensors["quality.fc2.weight"], fc2_b=tensors["quality.fc2.bias"],
            momentum=meta.get("quality.momentum", BN_MOMENTUM),
            eps=meta.get("quality.eps", BN_EPS))
        classifier = ClassifierParams(w=tensors["classifier.weight"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing tensor {exc}") from exc
    return ModelParams(BackboneParams(layers), quality, classifier, frozen=frozen)

"""Momentum SGD and the three-step freeze/retrain training pipeline.

Step 1 trains backbone + classifier with the quality fixed at 1. Step 2
freezes them and trains only the quality branch, driving it through the
derivative of the loss w.r.t. the quality scalar. Step 3 freezes the branch,
snapshots a quality score for every training sample and retrains the
backbone + classifier with those scores as constants, optionally dropping
samples whose score falls below a distilling threshold. Steps 2 and 3 can
iterate; the run stops after the final Step 2.

Everything is deterministic given (seed, config, data): epoch shuffles are
drawn from a generator keyed by (step seed, iteration, epoch), and updates
touch exactly the unfrozen components.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (DivergenceDetected, IncompleteQualityTable, InvalidConfig,
                     ShapeMismatch)
from .loss import LossConfig, backward_through_model, eqface_batch
from .model import ModelParams, forward, init_params, normalized_classifier

TRAINABLE_EXCLUDED = ("quality.bn.running_mean", "quality.bn.running_var")


@dataclass(frozen=True)
class OptimConfig:
    """One training run: schedule, batch size and shuffle seed."""

    lr0: float
    total_epochs: int
    decay_epochs: tuple = ()
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.lr0 < 0:
            raise InvalidConfig("lr0 must be >= 0")
        if self.total_epochs < 1:
            raise InvalidConfig("total_epochs must be >= 1")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise InvalidConfig("decay_epochs must be strictly ascending")
        if self.decay_epochs and max(self.decay_epochs) >= self.total_epochs:
            raise InvalidConfig("decay epochs must be < total_epochs")
        if self.batch_size < 4:
            raise InvalidConfig("batch_size must be >= 4 (branch BN needs batches)")


@dataclass(frozen=True)
class PipelineConfig:
    step1: OptimConfig
    step2: OptimConfig
    step3: OptimConfig
    loss: LossConfig = LossConfig()
    iterations: int = 2
    step3_restart: str = "continue"  # or "scratch"
    qwdf_threshold: float | None = None
    quality_head_only: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 1:
            raise InvalidConfig("iterations must be >= 1")
        if self.step3_restart not in ("continue", "scratch"):
            raise InvalidConfig(f"unknown step3_restart {self.step3_restart!r}")
        for opt in (self.step1, self.step2, self.step3):
            opt.validate()
        self.loss.validate()


@dataclass
class LogRow:
    step: str
    iteration: int
    epoch: int
    mean_loss: float
    lr: float


@dataclass
class PipelineResult:
    params: ModelParams
    step_sequence: list = field(default_factory=list)        # e.g. ["step1", "step2", ...]
    snapshots: list = field(default_factory=list)            # (tag, ModelParams copy)
    log_rows: list = field(default_factory=list)
    quality_tables: dict = field(default_factory=dict)       # iteration -> {sample_id: s}
    step3_contrib: dict = field(default_factory=dict)        # iteration -> per-epoch counts


def lr_at_epoch(cfg: OptimConfig, epoch: int) -> float:
    hits = sum(1 for e in cfg.decay_epochs if e <= epoch)
    return cfg.lr0 / cfg.decay_factor ** hits


def sgd_step(params: ModelParams, grads: dict, state: dict, cfg: OptimConfig,
             lr: float) -> None:
    """v <- mu*v + g + wd*theta; theta <- theta - lr*v, unfrozen tensors only."""
    tensors = {name: (component, arr) for name, component, arr in params.named_tensors()}
    for name, g in grads.items():
        if name not in tensors:
            raise ShapeMismatch(f"gradient for unknown tensor {name!r}")
        component, theta = tensors[name]
        if component in params.frozen or name in TRAINABLE_EXCLUDED:
            continue
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {theta.shape}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(theta)
            state[name] = v
        v *= cfg.momentum
        v += g + cfg.weight_decay * theta
        theta -= lr * v


def _epoch_order(seed: int, iteration: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, iteration, epoch]).permutation(n)


def _train_epochs(X, y, sample_qualities, params: ModelParams, opt: OptimConfig,
                  loss_cfg: LossConfig, quality_mode: str, step_name: str,
                  iteration: int, log_rows: list):
    """Shared loop for all three steps. Returns per-epoch sample counts."""
    opt.validate()
    n = X.shape[0]
    state: dict[str, np.ndarray] = {}
    contrib = []
    bad_batches = 0
    for epoch in range(opt.total_epochs):
        lr = lr_at_epoch(opt, epoch)
        order = _epoch_order(opt.seed, iteration, epoch, n)
        losses = []
        for start in range(0, n, opt.batch_size):
            idx = order[start:start + opt.batch_size]
            Xb, yb = X[idx], y[idx]
            fwd = forward(params, Xb, mode="train",
                          with_quality=(quality_mode == "live"))
            if quality_mode == "live":
                s_b = fwd.s
            elif quality_mode == "frozen":
                s_b = sample_qualities[idx]
            else:  # fixed_one
                s_b = np.ones(len(idx))
            lb = eqface_batch(fwd.f, normalized_classifier(params), yb, s_b, loss_cfg)
            mean_loss = float(lb.values.mean())
            if not np.isfinite(mean_loss):
                bad_batches += 1
                if bad_batches >= 3:
                    raise DivergenceDetected(
                        f"{step_name}: loss non-finite for {bad_batches} consecutive batches")
            else:
                bad_batches = 0
            grads = backward_through_model(lb, fwd, params, quality_mode)
            sgd_step(params, grads, state, opt, lr)
            losses.append(mean_loss)
        epoch_mean = float(np.mean(losses)) if losses else float("nan")
        log_rows.append(LogRow(step_name, iteration, epoch, epoch_mean, lr))
        contrib.append(n)
    return contrib


def run_step1(samples, params: ModelParams, pcfg: PipelineConfig,
              iteration: int = 1, log_rows=None):
    """Train backbone + classifier with quality fixed to 1; branch untouched."""
    log_rows = log_rows if log_rows is not None else []
    params.freeze("quality")
    params.unfreeze("backbone", "classifier")
    X = np.stack([s.x for s in samples])
    y = np.array([s.label for s in samples])
    _train_epochs(X, y, None, params, pcfg.step1, pcfg.loss,
                  "fixed_one", "step1", iteration, log_rows)
    return params


def run_step2(samples, params: ModelParams, pcfg: PipelineConfig,
              iteration: int = 1, log_rows=None):
    """Freeze backbone + classifier, train only the quality branch."""
    log_rows = log_rows if log_rows is not None else []
    params.freeze("backbone", "classifier")
    params.unfreeze("quality")
    X = np.stack([s.x for s in samples])
    y = np.array([s.label for s in samples])
    _train_epochs(X, y, None, params, pcfg.step2, pcfg.loss,
                  "live", "step2", iteration, log_rows)
    return params


def run_step3(samples, params: ModelParams, quality_table: dict,
              pcfg: PipelineConfig, iteration: int = 1, log_rows=None,
              contrib_out=None):
    """Retrain backbone + classifier with frozen per-sample qualities.

    With a distilling threshold set, samples with s < threshold are skipped
    entirely; the per-epoch contributing count is recorded in contrib_out.
    """
    log_rows = log_rows if log_rows is not None else []
    missing = [s.sample_id for s in samples if s.sample_id not in quality_table]
    if missing:
        raise IncompleteQualityTable(
            f"{len(missing)} samples missing from quality table, first: {missing[:5]}")

    kept = samples
    if pcfg.qwdf_threshold is not None:
        kept = [s for s in samples if quality_table[s.sample_id] >= pcfg.qwdf_threshold]

    params.freeze("quality")
    params.unfreeze("backbone", "classifier")
    if pcfg.step3_restart == "scratch":
        _reinit_baseline(params, pcfg, iteration)

    if kept:
        X = np.stack([s.x for s in kept])
        y = np.array([s.label for s in kept])
        qualities = np.array([quality_table[s.sample_id] for s in kept])
        contrib = _train_epochs(X, y, qualities, params, pcfg.step3, pcfg.loss,
                                "frozen", "step3", iteration, log_rows)
    else:
        # everything filtered out: no updates, but keep the schedule in the log
        contrib = []
        for epoch in range(pcfg.step3.total_epochs):
            log_rows.append(LogRow("step3", iteration, epoch, float("nan"),
                                   lr_at_epoch(pcfg.step3, epoch)))
            contrib.append(0)
    if contrib_out is not None:
        contrib_out.extend(contrib)
    return params


def _reinit_baseline(params: ModelParams, pcfg: PipelineConfig, iteration: int) -> None:
    """Fresh random backbone + classifier for step3_restart='scratch'."""
    hidden = params.backbone.layers[0].weight.shape[0]
    fresh = init_params(params.d_in, hidden, params.d, params.n_classes,
                        seed=[pcfg.step3.seed, iteration, 999331],
                        quality_hidden=params.quality.fc1_w.shape[0])
    for i, layer in enumerate(params.backbone.layers):
        layer.weight[...] = fresh.backbone.layers[i].weight
        layer.bias[...] = fresh.backbone.layers[i].bias
    params.classifier.w[...] = fresh.classifier.w


def build_quality_table(params: ModelParams, samples, batch_size: int = 256) -> dict:
    """Eval-mode quality score for every sample: {sample_id: s}."""
    table = {}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        fwd = forward(params, np.stack([s.x for s in chunk]), mode="eval")
        for sample, s_val in zip(chunk, fwd.s):
            table[sample.sample_id] = float(s_val)
    return table


def run_pipeline(samples, params: ModelParams, pcfg: PipelineConfig,
                 on_step=None) -> PipelineResult:
    """Full schedule: step1, then (step2, step3) x (iterations-1), then step2.

    With quality_head_only=True the given params are used as the finished
    baseline and only a single step2 runs. on_step(tag, params) is invoked
    after every step for incremental persistence.
    """
    pcfg.validate()
    result = PipelineResult(params=params)
    result.snapshots.append(("init", params.copy()))

    def record(tag: str, step: str):
        result.step_sequence.append(step)
        result.snapshots.append((tag, params.copy()))
        if on_step is not None:
            on_step(tag, params)

    if pcfg.quality_head_only:
        run_step2(samples, params, pcfg, iteration=1, log_rows=result.log_rows)
        result.quality_tables[1] = build_quality_table(params, samples)
        record("iter1.step2", "step2")
        return result

    run_step1(samples, params, pcfg, iteration=1, log_rows=result.log_rows)
    record("step1", "step1")

    for it in range(1, pcfg.iterations + 1):
        run_step2(samples, params, pcfg, iteration=it, log_rows=result.log_rows)
        result.quality_tables[it] = build_quality_table(params, samples)
        record(f"iter{it}.step2", "step2")
        if it < pcfg.iterations:
            contrib: list[int] = []
            run_step3(samples, params, result.quality_tables[it], pcfg,
                      iteration=it, log_rows=result.log_rows, contrib_out=contrib)
            result.step3_contrib[it] = contrib
            record(f"iter{it}.step3", "step3")
    return result


def save_quality_table(table: dict, path) -> None:
    lines = ["sample_id,s"]
    for sid in sorted(table):
        lines.append(f"{sid},{table[sid]:.17g}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_quality_table(path) -> dict:
    table = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "sample_id,s":
            raise InvalidConfig(f"unexpected quality table header: {header!r}")
        for line in fh:
            line = line.strip()
            if line:
                sid, s = line.split(",")
                table[int(sid)] = float(s)
    return table


def save_training_log(log_rows, path) -> None:
    lines = ["step,iteration,epoch,mean_loss,lr"]
    for row in log_rows:
        lines.append(f"{row.step},{row.iteration},{row.epoch},"
                     f"{row.mean_loss:.17g},{row.lr:.17g}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")

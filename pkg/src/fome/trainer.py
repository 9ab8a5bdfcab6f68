"""Masked-reconstruction pre-training, task fine-tuning, and metrics.

The optimizer loop is a single logical stream: per micro-step it draws a
mask plan per sample, runs the masked forward + reconstruction, averages
the loss over the batch, and backpropagates; every `grad_accum` micro-steps
it applies one AdamW update at the scheduled learning rate.  Losses are
mean-reduced and micro-batch losses are scaled by 1/grad_accum, so
accumulation matches a single step on the concatenated batch.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as mdl
from . import numerics as nm
from .errors import ConfigError, DataError, TrainError
from .model import ModelConfig, ParameterStore
from .numerics import Tensor
from .preprocess import PatchGrid
from .rng import Rng
from .spectral import BandPowerTensor, band_powers


@dataclass
class TrainConfig:
    """Optimization constants; defaults are the full-scale recipe."""

    mask_ratio: float = 0.40
    patches_per_sample: int = 15
    batch_size: int = 12
    grad_accum: int = 4
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-6
    weight_decay: float = 1e-2
    lr_init: float = 2e-6
    lr_peak: float = 5e-5
    lr_final: float = 5e-9
    warmup_steps: int = 10_960
    total_steps: int = 1_096_000
    seed: int = 0
    loss_scope: str = "masked_only"  # or "all"
    mask_mode: str = "slot"  # or "column"
    checkpoint_every: int = 500

    def __post_init__(self) -> None:
        if not 0 < self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.warmup_steps >= self.total_steps:
            raise ConfigError("warmup_steps must be < total_steps")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("batch_size and grad_accum must be >= 1")
        if self.loss_scope not in ("masked_only", "all"):
            raise ConfigError(f"loss_scope must be masked_only|all, got {self.loss_scope!r}")
        if self.mask_mode not in ("slot", "column"):
            raise ConfigError(f"mask_mode must be slot|column, got {self.mask_mode!r}")


def scale_schedule(cfg: TrainConfig, steps: int) -> TrainConfig:
    """Shrink the warmup+cosine schedule to a desk-scale step budget."""
    if steps < 2:
        raise ConfigError("need at least 2 steps to scale the schedule")
    frac = cfg.warmup_steps / cfg.total_steps
    warmup = min(max(1, int(round(steps * frac))), steps - 1)
    return replace(cfg, total_steps=steps, warmup_steps=warmup)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from lr_init to lr_peak, then cosine decay to lr_final."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.lr_peak
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * (step / cfg.warmup_steps)
    if step >= cfg.total_steps:
        return cfg.lr_final
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    Update order per parameter: decay (p *= 1 - lr*wd), then the adaptive
    step p -= lr * m_hat / (sqrt(v_hat) + eps).  A missing gradient is
    treated as zero, so decay still applies.
    """

    def __init__(self, named: dict[str, Tensor], cfg: TrainConfig):
        self.named = dict(named)
        self.cfg = cfg
        self.t = 0
        self._m = {k: np.zeros_like(v.data) for k, v in self.named.items()}
        self._v = {k: np.zeros_like(v.data) for k, v in self.named.items()}

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        bias1 = 1.0 - cfg.beta1**self.t
        bias2 = 1.0 - cfg.beta2**self.t
        for name, tensor in self.named.items():
            g = tensor.grad
            if g is None:
                g = np.zeros_like(tensor.data)
            elif not np.all(np.isfinite(g)):
                raise TrainError(f"non-finite gradient for parameter {name!r}")
            if cfg.weight_decay:
                tensor.data *= 1.0 - lr * cfg.weight_decay
            m = self._m[name]
            v = self._v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g**2
            tensor.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)
            tensor.grad = None


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskPlan:
    """The (channel, patch) slots hidden from the encoder for one sample."""

    slots: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.slots)

    def __iter__(self):
        return iter(self.slots)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_mask_plan(
    channels: int, patches: int, ratio: float, stream: Rng, mode: str = "slot"
) -> MaskPlan:
    """Draw round(ratio * C * P) unique slots, uniformly without replacement.

    Column mode instead hides round(ratio * P) whole patch columns across
    every channel.
    """
    if not 0 < ratio < 1:
        raise ConfigError(f"mask ratio must be in (0, 1), got {ratio}")
    if mode == "slot":
        k = _round_half_up(ratio * channels * patches)
        flat = stream.sample_without_replacement(channels * patches, k)
        slots = tuple((int(i) // patches, int(i) % patches) for i in flat)
    elif mode == "column":
        k = _round_half_up(ratio * patches)
        cols = stream.sample_without_replacement(patches, k)
        slots = tuple((c, int(p)) for p in cols for c in range(channels))
    else:
        raise ConfigError(f"unknown mask mode {mode!r}")
    return MaskPlan(slots=slots)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Task metrics; classification fields or regression fields are filled."""

    task: str
    accuracy: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    f2: float | None = None
    confusion: list[list[int]] | None = None
    per_class: dict[str, dict[str, float]] | None = None
    mae: float | None = None
    mse: float | None = None
    baseline: dict[str, float] | None = None
    notes: dict = field(default_factory=dict)

    def to_json(self, indent: int | None = 2) -> str:
        payload = {k: v for k, v in self.__dict__.items() if v is not None}
        return json.dumps(payload, indent=indent)


def fbeta(precision: float, recall: float, beta: float) -> float:
    denom = beta**2 * precision + recall
    if denom == 0.0:
        return 0.0
    return (1.0 + beta**2) * precision * recall / denom


def classification_metrics(preds, labels, n_classes: int) -> MetricsReport:
    """Confusion matrix plus accuracy and macro precision/recall/F1/F2.

    Macro averages run over the classes that occur in the labels or the
    predictions; a class with zero predicted and zero actual instances does
    not dilute them.  Empty precision/recall denominators count as 0.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise DataError(f"preds shape {preds.shape} != labels shape {labels.shape}")
    if preds.size == 0:
        raise DataError("cannot score an empty prediction set")
    for arr, kind in ((preds, "prediction"), (labels, "label")):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise DataError(f"{kind} outside [0, {n_classes})")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for y, yhat in zip(labels, preds):
        confusion[y, yhat] += 1
    accuracy = float(np.trace(confusion)) / preds.size
    present = sorted(set(labels.tolist()) | set(preds.tolist()))
    per_class: dict[str, dict[str, float]] = {}
    macro = {"precision": 0.0, "recall": 0.0, "f1": 0.0, "f2": 0.0}
    for k in present:
        tp = float(confusion[k, k])
        fp = float(confusion[:, k].sum() - tp)
        fn = float(confusion[k, :].sum() - tp)
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        row = {
            "precision": precision,
            "recall": recall,
            "f1": fbeta(precision, recall, 1.0),
            "f2": fbeta(precision, recall, 2.0),
        }
        per_class[str(k)] = row
        for key in macro:
            macro[key] += row[key]
    for key in macro:
        macro[key] /= len(present)
    return MetricsReport(
        task="classification",
        accuracy=accuracy,
        precision=macro["precision"],
        recall=macro["recall"],
        f1=macro["f1"],
        f2=macro["f2"],
        confusion=confusion.tolist(),
        per_class=per_class,
    )


def regression_metrics(preds, targets, task: str = "regression") -> MetricsReport:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise DataError(f"preds shape {preds.shape} != targets shape {targets.shape}")
    diff = preds - targets
    return MetricsReport(task=task, mae=float(np.mean(np.abs(diff))), mse=float(np.mean(diff**2)))


def compute_metrics(preds, labels=None, targets=None, n_classes=None) -> MetricsReport:
    """Dispatch to classification or regression scoring."""
    if labels is not None:
        if n_classes is None:
            n_classes = int(max(np.max(labels), np.max(preds))) + 1
        return classification_metrics(preds, labels, n_classes)
    if targets is not None:
        return regression_metrics(preds, targets)
    raise ConfigError("compute_metrics needs labels (classification) or targets (regression)")


# ---------------------------------------------------------------------------
# shared loop machinery
# ---------------------------------------------------------------------------


def split_blocks(n: int, ratios=(0.6, 0.2, 0.2)) -> tuple[range, range, range]:
    """Contiguous 6:2:2 index blocks, so neighbouring context never leaks
    across the train/validation/test boundary."""
    if n < 1:
        raise ConfigError("cannot split an empty dataset")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, n)


class _CheckpointKeeper:
    """Cadence checkpoints every `checkpoint_every` optimizer steps, plus a
    best-validation snapshot; inactive when no directory is given."""

    def __init__(self, params: ParameterStore, cfg: TrainConfig, directory):
        self.params = params
        self.cfg = cfg
        self.directory = directory
        self.opt_steps = 0
        self.best: float | None = None
        if directory is not None:
            os.makedirs(directory, exist_ok=True)

    def after_optimizer_step(self, validation_metric, higher_is_better: bool) -> None:
        self.opt_steps += 1
        if self.directory is None or self.opt_steps % self.cfg.checkpoint_every != 0:
            return
        mdl.save_params(self.params, f"{self.directory}/step-{self.opt_steps:06d}.fckp")
        score = validation_metric()
        if score is None:
            return
        improved = (
            self.best is None
            or (score > self.best if higher_is_better else score < self.best)
        )
        if improved:
            self.best = score
            mdl.save_params(self.params, f"{self.directory}/best-validation.fckp")

    def finish(self) -> None:
        if self.directory is not None:
            mdl.save_params(self.params, f"{self.directory}/final.fckp")


class _Cycler:
    """Seeded epoch-shuffled index stream."""

    def __init__(self, indices: list[int], stream: Rng):
        if not indices:
            raise ConfigError("empty index set")
        self._indices = list(indices)
        self._stream = stream
        self._queue: list[int] = []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self._queue:
                self._queue = self._stream.shuffle(self._indices)
            out.append(self._queue.pop(0))
        return out


def _bands_for(grid: PatchGrid, model_cfg: ModelConfig) -> BandPowerTensor | None:
    return band_powers(grid) if model_cfg.use_freq_embed else None


def _masked_mse(rec: Tensor, target: np.ndarray, plan: MaskPlan, scope: str) -> Tensor:
    if scope == "all" or len(plan) == 0:
        return nm.mse(rec, Tensor(target))
    c, p, _ = target.shape
    gate = np.zeros((c, p, 1))
    for ch, pa in plan:
        gate[ch, pa, 0] = 1.0
    g = Tensor(gate)
    masked_fraction = len(plan) / (c * p)
    return nm.scale(nm.mse(nm.mul(rec, g), Tensor(target * gate)), 1.0 / masked_fraction)


def _ensure_head(params: ParameterStore, shapes: dict, seed: int) -> None:
    missing = {k: v for k, v in shapes.items() if k not in params}
    if missing and len(missing) != len(shapes):
        raise ConfigError("parameter store holds a partial head; refusing to mix")
    if missing:
        params.add(missing, seed)


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------


def pretrain(
    corpus: list[PatchGrid],
    params: ParameterStore,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    steps: int,
    checkpoint_dir=None,
) -> list[tuple[int, float, float]]:
    """Masked signal reconstruction; returns the (step, lr, loss) trace.

    Loss column is the batch-mean reconstruction MSE over the configured
    scope, before gradient-accumulation scaling.
    """
    if not corpus:
        raise ConfigError("pretrain needs a non-empty corpus")
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
    _ensure_head(params, mdl.reconstruct_head_shapes(model_cfg), seed=cfg.seed + 1)
    bands = [_bands_for(g, model_cfg) for g in corpus]
    order = _Cycler(list(range(len(corpus))), Rng(cfg.seed).split(1))
    mask_stream = Rng(cfg.seed).split(2)
    drop_stream = Rng(cfg.seed).split(3) if model_cfg.dropout > 0 else None
    optimizer = AdamW(dict(params.items()), cfg)
    trace: list[tuple[int, float, float]] = []
    opt_steps = 0
    for step in range(1, steps + 1):
        batch = order.take(cfg.batch_size)
        with nm.Tape():
            total = None
            for idx in batch:
                grid = corpus[idx]
                plan = make_mask_plan(
                    grid.n_channels, grid.n_patches, cfg.mask_ratio, mask_stream, cfg.mask_mode
                )
                encoded = mdl.forward(
                    grid, bands[idx], params, model_cfg,
                    mask_indices=plan, stream=drop_stream,
                )
                rec = mdl.head_reconstruct(encoded, params)
                loss = _masked_mse(rec, grid.patches, plan, cfg.loss_scope)
                total = loss if total is None else nm.add(total, loss)
            batch_loss = nm.scale(total, 1.0 / len(batch))
            scaled = nm.scale(batch_loss, 1.0 / cfg.grad_accum)
        nm.backward(scaled)
        lr = lr_at(step, cfg)
        trace.append((step, lr, float(batch_loss.data)))
        if step % cfg.grad_accum == 0:
            optimizer.step(lr)
            opt_steps += 1
            if checkpoint_dir is not None and opt_steps % cfg.checkpoint_every == 0:
                mdl.save_params(params, f"{checkpoint_dir}/step-{opt_steps:06d}.fckp")
    if checkpoint_dir is not None:
        mdl.save_params(params, f"{checkpoint_dir}/final.fckp")
    return trace


def write_loss_trace(trace: list[tuple[int, float, float]], path) -> None:
    with open(path, "w") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in trace:
            fh.write(f"{step},{lr!r},{loss!r}\n")


# ---------------------------------------------------------------------------
# classification fine-tuning
# ---------------------------------------------------------------------------


def _class_probabilities(
    grid: PatchGrid, bands, params: ParameterStore, model_cfg: ModelConfig, n_classes: int
) -> Tensor:
    encoded = mdl.forward(grid, bands, params, model_cfg)
    return mdl.head_classify(encoded, params, n_classes)


def evaluate_classify(
    dataset: list[tuple[PatchGrid, int]],
    params: ParameterStore,
    model_cfg: ModelConfig,
    n_classes: int,
) -> MetricsReport:
    preds, labels = [], []
    for grid, label in dataset:
        probs = _class_probabilities(grid, _bands_for(grid, model_cfg), params, model_cfg, n_classes)
        preds.append(int(np.argmax(probs.data)))
        labels.append(int(label))
    return classification_metrics(preds, labels, n_classes)


def finetune_classify(
    dataset: list[tuple[PatchGrid, int]],
    params: ParameterStore,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    n_classes: int,
    steps: int,
    mode: str = "full",
    checkpoint_dir=None,
    splits=None,
) -> MetricsReport:
    """Cross-entropy training on the 6:2:2 contiguous split; scores the test
    block.  `probe` freezes the backbone (its tensors stay bit-identical).
    `splits` overrides the default split with explicit (train, val, test)
    index collections, e.g. from a dataset manifest's split column."""
    if mode not in ("full", "probe"):
        raise ConfigError(f"mode must be full|probe, got {mode!r}")
    for _, label in dataset:
        if not 0 <= int(label) < n_classes:
            raise DataError(f"label {label} outside [0, {n_classes})")
    _ensure_head(params, mdl.classify_head_shapes(model_cfg, n_classes), seed=cfg.seed + 2)
    train_idx, val_idx, test_idx = splits if splits is not None else split_blocks(len(dataset))
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ConfigError(f"dataset of {len(dataset)} samples leaves an empty split")
    bands = [_bands_for(g, model_cfg) for g, _ in dataset]
    sched = scale_schedule(cfg, steps)
    trainable = params.tensors("head.cls.") if mode == "probe" else dict(params.items())
    optimizer = AdamW(trainable, sched)
    order = _Cycler(list(train_idx), Rng(cfg.seed).split(4))
    checkpoints = _CheckpointKeeper(params, cfg, checkpoint_dir)

    def val_accuracy():
        if not len(val_idx):
            return None
        return evaluate_classify(
            [dataset[i] for i in val_idx], params, model_cfg, n_classes
        ).accuracy

    for step in range(1, steps + 1):
        batch = order.take(cfg.batch_size)
        if mode == "probe":
            frozen = [
                mdl.forward(dataset[i][0], bands[i], params, model_cfg).values.detach()
                for i in batch
            ]
        with nm.Tape():
            total = None
            for pos, idx in enumerate(batch):
                if mode == "probe":
                    probs = mdl.head_classify(
                        mdl.EmbeddingTensor(frozen[pos], role="channel"), params, n_classes
                    )
                else:
                    probs = _class_probabilities(
                        dataset[idx][0], bands[idx], params, model_cfg, n_classes
                    )
                picked = nm.slice_(probs, int(dataset[idx][1]))
                loss = nm.scale(nm.log(picked), -1.0)
                total = loss if total is None else nm.add(total, loss)
            batch_loss = nm.scale(total, 1.0 / (len(batch) * cfg.grad_accum))
        nm.backward(batch_loss)
        if step % cfg.grad_accum == 0:
            optimizer.step(lr_at(step, sched))
            checkpoints.after_optimizer_step(val_accuracy, higher_is_better=True)
    checkpoints.finish()
    report = evaluate_classify([dataset[i] for i in test_idx], params, model_cfg, n_classes)
    report.notes.update({"mode": mode, "steps": steps, "train_samples": len(train_idx)})
    return report


# ---------------------------------------------------------------------------
# forecasting
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ForecastSample:
    """Context patches plus the flattened future signal (channels, H)."""

    context: PatchGrid
    target: np.ndarray


def forecast_samples_from_grid(
    grid: PatchGrid, context_patches: int, horizon_patches: int, stride: int | None = None
) -> list[ForecastSample]:
    """Cut sliding (context, horizon) windows along the patch axis."""
    span = context_patches + horizon_patches
    if grid.n_patches < span:
        raise ConfigError(f"grid has {grid.n_patches} patches, window needs {span}")
    stride = span if stride is None else stride
    samples = []
    for start in range(0, grid.n_patches - span + 1, stride):
        ctx = PatchGrid(
            grid.patches[:, start : start + context_patches],
            grid.patch_len,
            grid.source_rate_hz,
        )
        fut = grid.patches[:, start + context_patches : start + span]
        target = fut.reshape(grid.n_channels, horizon_patches * grid.patch_len)
        samples.append(ForecastSample(context=ctx, target=target))
    return samples


def persistence_forecast(sample: ForecastSample, horizon_patches: int) -> np.ndarray:
    """Repeat the most recent context patch across the horizon."""
    last = sample.context.patches[:, -1, :]
    return np.tile(last, (1, horizon_patches))


def evaluate_forecast(
    samples: list[ForecastSample],
    params: ParameterStore,
    model_cfg: ModelConfig,
    horizon_patches: int,
) -> MetricsReport:
    preds, targets, persist = [], [], []
    for sample in samples:
        encoded = mdl.forward(sample.context, _bands_for(sample.context, model_cfg), params, model_cfg)
        preds.append(mdl.head_forecast(encoded, params, horizon_patches).data)
        targets.append(sample.target)
        persist.append(persistence_forecast(sample, horizon_patches))
    report = regression_metrics(np.stack(preds), np.stack(targets), task="forecast")
    base = regression_metrics(np.stack(persist), np.stack(targets))
    report.baseline = {"persistence_mae": base.mae, "persistence_mse": base.mse}
    return report


def finetune_forecast(
    dataset: list[ForecastSample],
    params: ParameterStore,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    horizon_patches: int,
    steps: int,
    mode: str = "full",
    checkpoint_dir=None,
) -> MetricsReport:
    """MSE training of the forecast head (optionally the backbone too)."""
    if mode not in ("full", "probe"):
        raise ConfigError(f"mode must be full|probe, got {mode!r}")
    if not dataset:
        raise ConfigError("empty forecast dataset")
    context_patches = dataset[0].context.n_patches
    _ensure_head(
        params,
        mdl.forecast_head_shapes(model_cfg, context_patches, horizon_patches),
        seed=cfg.seed + 3,
    )
    train_idx, val_idx, test_idx = split_blocks(len(dataset))
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ConfigError(f"dataset of {len(dataset)} samples leaves an empty split")
    bands = [_bands_for(s.context, model_cfg) for s in dataset]
    sched = scale_schedule(cfg, steps)
    trainable = params.tensors("head.fcst.") if mode == "probe" else dict(params.items())
    optimizer = AdamW(trainable, sched)
    order = _Cycler(list(train_idx), Rng(cfg.seed).split(5))
    checkpoints = _CheckpointKeeper(params, cfg, checkpoint_dir)

    def val_mse():
        if not len(val_idx):
            return None
        return evaluate_forecast(
            [dataset[i] for i in val_idx], params, model_cfg, horizon_patches
        ).mse

    for step in range(1, steps + 1):
        batch = order.take(cfg.batch_size)
        with nm.Tape():
            total = None
            for idx in batch:
                sample = dataset[idx]
                encoded = mdl.forward(sample.context, bands[idx], params, model_cfg)
                pred = mdl.head_forecast(encoded, params, horizon_patches)
                loss = nm.mse(pred, Tensor(sample.target))
                total = loss if total is None else nm.add(total, loss)
            batch_loss = nm.scale(total, 1.0 / (len(batch) * cfg.grad_accum))
        nm.backward(batch_loss)
        if step % cfg.grad_accum == 0:
            optimizer.step(lr_at(step, sched))
            checkpoints.after_optimizer_step(val_mse, higher_is_better=False)
    checkpoints.finish()
    report = evaluate_forecast([dataset[i] for i in test_idx], params, model_cfg, horizon_patches)
    report.notes.update({"mode": mode, "steps": steps, "horizon_patches": horizon_patches})
    return report


# ---------------------------------------------------------------------------
# imputation
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ImputeSample:
    """A grid plus the (channels, patches) boolean map of missing patches."""

    grid: PatchGrid
    missing: np.ndarray


def missing_patches_from_sample_mask(sample_missing: np.ndarray, patch_len: int) -> np.ndarray:
    """Patch-level missingness: a patch with any missing value is missing."""
    c, t = sample_missing.shape
    p = t // patch_len
    trimmed = sample_missing[:, : p * patch_len].reshape(c, p, patch_len)
    return trimmed.any(axis=2)


def make_impute_samples(
    grids: list[PatchGrid], missing_ratio: float, stream: Rng
) -> list[ImputeSample]:
    """Hide round(ratio * C * P) patches per grid, uniformly at random."""
    samples = []
    for grid in grids:
        plan = make_mask_plan(grid.n_channels, grid.n_patches, missing_ratio, stream, "slot")
        missing = np.zeros((grid.n_channels, grid.n_patches), dtype=bool)
        for c, p in plan:
            missing[c, p] = True
        samples.append(ImputeSample(grid=grid, missing=missing))
    return samples


def mean_imputation(sample: ImputeSample) -> np.ndarray:
    """Fill missing patches with the channel's mean over observed samples."""
    filled = sample.grid.patches.copy()
    for c in range(sample.grid.n_channels):
        observed = sample.grid.patches[c, ~sample.missing[c]]
        value = float(observed.mean()) if observed.size else 0.0
        filled[c, sample.missing[c]] = value
    return filled


def _observed_grid(sample: ImputeSample) -> PatchGrid:
    """The model's view: missing patches zeroed (their content is replaced
    by the mask embedding anyway, but band powers must not see the truth)."""
    patches = sample.grid.patches.copy()
    patches[sample.missing] = 0.0
    return PatchGrid(patches, sample.grid.patch_len, sample.grid.source_rate_hz)


def evaluate_impute(
    samples: list[ImputeSample], params: ParameterStore, model_cfg: ModelConfig
) -> MetricsReport:
    """Reconstruction error on missing patches only, vs mean imputation."""
    pred_vals, base_vals, true_vals = [], [], []
    for sample in samples:
        if not sample.missing.any():
            continue
        observed = _observed_grid(sample)
        slots = [tuple(idx) for idx in np.argwhere(sample.missing)]
        encoded = mdl.forward(
            observed, _bands_for(observed, model_cfg), params, model_cfg, mask_indices=slots
        )
        rec = mdl.head_reconstruct(encoded, params).data
        filled = mean_imputation(sample)
        pred_vals.append(rec[sample.missing].ravel())
        base_vals.append(filled[sample.missing].ravel())
        true_vals.append(sample.grid.patches[sample.missing].ravel())
    if not pred_vals:
        report = MetricsReport(task="imputation")
        report.notes["no-missing"] = True
        return report
    preds = np.concatenate(pred_vals)
    truth = np.concatenate(true_vals)
    report = regression_metrics(preds, truth, task="imputation")
    base = regression_metrics(np.concatenate(base_vals), truth)
    report.baseline = {"mean_imputation_mae": base.mae, "mean_imputation_mse": base.mse}
    return report


def impute(
    dataset: list[ImputeSample],
    params: ParameterStore,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    steps: int,
) -> MetricsReport:
    """Train reconstruction on the train block, then score missing-patch
    recovery on the test block."""
    if not dataset:
        raise ConfigError("empty imputation dataset")
    train_idx, _, test_idx = split_blocks(len(dataset))
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ConfigError(f"dataset of {len(dataset)} samples leaves an empty split")
    corpus = [dataset[i].grid for i in train_idx]
    pretrain(corpus, params, model_cfg, cfg, steps)
    report = evaluate_impute([dataset[i] for i in test_idx], params, model_cfg)
    report.notes.update({"steps": steps, "train_samples": len(train_idx)})
    return report

"""Desk-scale continual-learning harness around a frozen random backbone.

Each task trains a fresh residual bottleneck adapter plus a throwaway
linear head with plain mini-batch gradient descent (gradients are written
out by hand; they are validated against finite differences in the test
suite). Classification is nearest-prototype by cosine similarity, so only
the adapter and the prototype bank survive a task.
"""

from __future__ import annotations

import enum
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .adapter import AdapterModule, adapter_forward, as_matrix, freeze
from .counters import SVD_CALLS
from .errors import ConfigError, NumericError, ShapeError, TrainingError
from .merge import (MergeConfig, info_weights, merge_average, merge_modules,
                    merge_symmetric)
from .metrics import RunReport
from .stream import Task, TaskStream

BACKBONE_DIM = 32


class Strategy(enum.Enum):
    ONE_A = "one-a"
    AVERAGE = "average"
    SYMMETRIC = "symmetric"
    PER_TASK = "per-task"
    SINGLE_FINETUNE = "single-finetune"


@dataclass(frozen=True)
class Backbone:
    """A fixed random linear projection with ReLU; never trained."""

    projection: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "projection",
                           freeze(as_matrix(self.projection, "projection")))

    @classmethod
    def from_seed(cls, d_in: int, d_out: int, seed) -> "Backbone":
        rng = np.random.default_rng(seed)
        return cls(projection=rng.normal(scale=1.0 / math.sqrt(d_in),
                                         size=(d_in, d_out)))

    def features(self, x: np.ndarray) -> np.ndarray:
        x = as_matrix(x, "x")
        if x.shape[1] != self.projection.shape[0]:
            raise ShapeError(f"input width {x.shape[1]} does not match backbone "
                             f"{self.projection.shape[0]}")
        return np.maximum(x @ self.projection, 0.0)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs_base: int = 15      # epochs at the reference task size
    epochs_min: int = 2
    epochs_max: int = 60
    beta: float = 0.5          # epoch growth exponent in task size
    lambda_min: float = 0.01
    lambda_max: float = 0.1
    k_decay: float = 2.3979    # decay rate of the contrastive weight
    tau_margin: float = 0.07
    batch_size: int = 32
    bottleneck: int = 8
    cosine_lr: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs_base < 1:
            raise ConfigError(f"epochs_base must be >= 1, got {self.epochs_base}")
        if self.epochs_min < 0 or self.epochs_min > self.epochs_max:
            raise ConfigError(f"need 0 <= epochs_min <= epochs_max, got "
                              f"{self.epochs_min}..{self.epochs_max}")
        if not 0.0 <= self.lambda_min <= self.lambda_max <= 1.0:
            raise ConfigError("need 0 <= lambda_min <= lambda_max <= 1")
        if self.beta < 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.k_decay <= 0.0:
            raise ConfigError(f"k_decay must be > 0, got {self.k_decay}")
        if not 0.0 <= self.tau_margin < 1.0:
            raise ConfigError(f"tau_margin must lie in [0, 1), got {self.tau_margin}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.bottleneck < 1:
            raise ConfigError(f"bottleneck must be >= 1, got {self.bottleneck}")


def lambda_schedule(class_count: int, cfg: TrainConfig) -> float:
    """Contrastive weight, largest for single-class tasks and decaying
    exponentially toward lambda_min as tasks widen.

    Arranged as lambda_max + (lambda_min - lambda_max) * (1 - exp(...)) so
    class_count == 1 returns lambda_max exactly.
    """
    if class_count < 1:
        raise ConfigError(f"class_count must be >= 1, got {class_count}")
    decay = 1.0 - math.exp(-cfg.k_decay * (class_count - 1))
    return cfg.lambda_max + (cfg.lambda_min - cfg.lambda_max) * decay


def epoch_schedule(class_count: int, total_classes: int, num_tasks: int,
                   cfg: TrainConfig) -> int:
    """Epoch budget scaled by task size relative to the balanced size C/T."""
    if total_classes < 1 or num_tasks < 1:
        raise ConfigError("total_classes and num_tasks must be >= 1")
    return _epochs_for(class_count, total_classes / num_tasks, cfg)


def _epochs_for(class_count: int, t0: float, cfg: TrainConfig) -> int:
    if class_count < 1:
        raise ConfigError(f"class_count must be >= 1, got {class_count}")
    if t0 <= 0.0:
        raise ConfigError(f"reference task size must be > 0, got {t0}")
    raw = cfg.epochs_base * (class_count / t0) ** cfg.beta
    return min(max(int(round(raw)), cfg.epochs_min), cfg.epochs_max)


def _normalize_rows(z: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        raise NumericError(f"{what} contains a zero-norm row")
    return z / norms[:, None], norms


def _pair_coefficients(sims: np.ndarray, same: np.ndarray, tau: float):
    """Loss value and d(loss)/d(similarity) over the strict upper triangle."""
    n = sims.shape[0]
    iu = np.triu_indices(n, k=1)
    pos = same[iu]
    neg = ~pos
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    coeff = np.zeros((n, n))
    loss = 0.0
    if n_pos:
        loss += float(np.mean(1.0 - sims[iu][pos]))
        rows, cols = iu[0][pos], iu[1][pos]
        coeff[rows, cols] -= 1.0 / n_pos
    if n_neg:
        margins = sims[iu][neg] - tau
        active = margins > 0.0
        loss += float(np.sum(margins[active])) / n_neg
        rows, cols = iu[0][neg][active], iu[1][neg][active]
        coeff[rows, cols] += 1.0 / n_neg
    return loss, coeff, n_pos, n_neg


def contrastive_loss(features: np.ndarray, labels, tau: float) -> float:
    """Pairwise cosine objective: positives are pulled to similarity 1,
    negatives hinge-pushed below tau. Features are normalized internally;
    both pair means are over all within-batch pairs of that kind.
    """
    z = as_matrix(features, "features")
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} rows")
    if not 0.0 <= tau < 1.0:
        raise ConfigError(f"tau must lie in [0, 1), got {tau}")
    f, _ = _normalize_rows(z, "features")
    same = labels[:, None] == labels[None, :]
    loss, _, n_pos, n_neg = _pair_coefficients(f @ f.T, same, tau)
    if n_pos == 0 and n_neg == 0:
        warnings.warn("batch holds no sample pairs; contrastive loss is 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    return loss


def _contrastive_grad(z: np.ndarray, labels: np.ndarray, tau: float):
    """Contrastive loss and its gradient with respect to unnormalized z."""
    f, norms = _normalize_rows(z, "features")
    same = labels[:, None] == labels[None, :]
    loss, coeff, _, _ = _pair_coefficients(f @ f.T, same, tau)
    df = (coeff + coeff.T) @ f
    dz = (df - f * np.sum(f * df, axis=1, keepdims=True)) / norms[:, None]
    return loss, dz


def _cross_entropy_grad(z: np.ndarray, y: np.ndarray, head_w: np.ndarray,
                        head_b: np.ndarray):
    """Mean softmax cross-entropy and gradients w.r.t. z and the head."""
    n = z.shape[0]
    logits = z @ head_w + head_b
    shift = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shift), axis=1, keepdims=True))
    loss = float(-np.mean(shift[np.arange(n), y] - log_norm[:, 0]))
    dlogits = np.exp(shift - log_norm)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    return loss, dlogits @ head_w.T, z.T @ dlogits, dlogits.sum(axis=0)


def objective(h: np.ndarray, y: np.ndarray, params: dict, lam: float,
              tau: float) -> tuple[float, dict]:
    """Forward-only training objective for a batch of backbone features.

    Returns the scalar loss plus its named terms. With two or more classes
    present the loss is (1 - lam) * cross-entropy + lam * contrastive; a
    single-class batch trains on the contrastive term alone at full weight.
    """
    a = h @ params["w_down"]
    z = h + np.maximum(a, 0.0) @ params["w_up"]
    single = params["head_w"].shape[1] < 2
    if single:
        ctr, _ = _contrastive_grad(z, y, tau)
        return ctr, {"ce": 0.0, "ctr": ctr}
    ce, _, _, _ = _cross_entropy_grad(z, y, params["head_w"], params["head_b"])
    ctr, _ = _contrastive_grad(z, y, tau)
    return (1.0 - lam) * ce + lam * ctr, {"ce": ce, "ctr": ctr}


def objective_grads(h: np.ndarray, y: np.ndarray, params: dict, lam: float,
                    tau: float) -> tuple[float, dict]:
    """Loss and analytic gradients for every parameter in params.

    Reverse-mode accumulation through the residual adapter and the local
    linear head; the ReLU and hinge use the 0 subgradient at their kinks.
    """
    w_down, w_up = params["w_down"], params["w_up"]
    head_w, head_b = params["head_w"], params["head_b"]
    a = h @ w_down
    relu_a = np.maximum(a, 0.0)
    z = h + relu_a @ w_up
    single = head_w.shape[1] < 2

    grads = {"head_w": np.zeros_like(head_w), "head_b": np.zeros_like(head_b)}
    if single:
        loss, dz = _contrastive_grad(z, y, tau)
    else:
        ce, dz_ce, dhw, dhb = _cross_entropy_grad(z, y, head_w, head_b)
        ctr, dz_ctr = _contrastive_grad(z, y, tau)
        loss = (1.0 - lam) * ce + lam * ctr
        dz = (1.0 - lam) * dz_ce + lam * dz_ctr
        grads["head_w"] = (1.0 - lam) * dhw
        grads["head_b"] = (1.0 - lam) * dhb
    grads["w_up"] = relu_a.T @ dz
    da = (dz @ w_up.T) * (a > 0.0)
    grads["w_down"] = h.T @ da
    return loss, grads


def train_task(task: Task, backbone: Backbone, cfg: TrainConfig, *,
               t0: float | None = None, init: AdapterModule | None = None,
               return_head: bool = False):
    """Train one adapter (and a discarded local head) on a single task.

    Args:
        task: metadata plus the train split to fit.
        t0: reference task size C / T of the surrounding stream; defaults
            to this task's own class count (epoch budget epochs_base).
        init: adapter to continue from instead of a fresh initialization.
        return_head: also return the trained (head_w, head_b) pair, which
            run_sequence never keeps.

    Returns:
        The trained AdapterModule, or (module, head) when return_head is set.
    """
    meta, data = task.meta, task.data
    n = data.train_x.shape[0]
    if n == 0:
        raise ConfigError(f"task {meta.task_id} has no training samples")
    # every task's adapter spawns from the same initialization (stream
    # key (0, 1)) so trained adapters stay comparable for merging; only
    # the batch shuffle stream is task-specific
    init_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0, 1)))
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1, meta.task_id)))
    d = backbone.projection.shape[1]
    b = cfg.bottleneck

    if init is not None:
        if len(init.layers) != 2 or init.layers[0].shape != (d, b):
            raise ShapeError("init adapter does not match backbone/bottleneck dims")
        w_down = np.array(init.layers[0])
        w_up = np.array(init.layers[1])
    else:
        # classic residual-adapter start: random down, zero up, so the
        # adapted features begin exactly at the backbone features
        w_down = init_rng.normal(scale=1.0 / math.sqrt(d), size=(d, b))
        w_up = np.zeros((b, d))

    classes = sorted(meta.class_ids)
    k = len(classes)
    y_local = np.searchsorted(classes, data.train_y)
    head_w = init_rng.normal(scale=1.0 / math.sqrt(d), size=(d, k))
    head_b = np.zeros(k)
    params = {"w_down": w_down, "w_up": w_up, "head_w": head_w, "head_b": head_b}

    lam = lambda_schedule(k, cfg)
    epochs = _epochs_for(k, t0 if t0 is not None else float(k), cfg)
    h_all = backbone.features(data.train_x)
    n_batches = math.ceil(n / cfg.batch_size)
    total_steps = max(1, epochs * n_batches)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = objective_grads(h_all[idx], y_local[idx], params,
                                          lam, cfg.tau_margin)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"loss diverged on task {meta.task_id} "
                    f"(seed={cfg.seed}, lr={cfg.lr}, batch={cfg.batch_size})")
            lr = cfg.lr
            if cfg.cosine_lr:
                lr *= 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            for name, grad in grads.items():
                params[name] -= lr * grad
            step += 1

    module = AdapterModule(layers=(params["w_down"], params["w_up"]),
                           bottleneck=b, meta=meta)
    if return_head:
        return module, (params["head_w"], params["head_b"])
    return module


def adapted_features(x: np.ndarray, adapter: AdapterModule,
                     backbone: Backbone) -> np.ndarray:
    """Backbone features passed through the adapter stack."""
    z = backbone.features(x)
    for w_down, w_up in adapter.layer_pairs():
        z = adapter_forward(z, w_down, w_up)
    return z


@dataclass(frozen=True)
class PrototypeBank:
    """One mean feature vector per class, plus the producing task."""

    prototypes: dict[int, np.ndarray]
    source_task: dict[int, int]

    def __post_init__(self):
        for cid, vec in self.prototypes.items():
            arr = np.asarray(vec, dtype=np.float64).reshape(-1)
            if np.linalg.norm(arr) == 0.0:
                raise NumericError(f"prototype for class {cid} has zero norm")
            arr.flags.writeable = False
            self.prototypes[cid] = arr

    def updated(self, other: "PrototypeBank") -> "PrototypeBank":
        protos = dict(self.prototypes)
        protos.update(other.prototypes)
        sources = dict(self.source_task)
        sources.update(other.source_task)
        return PrototypeBank(prototypes=protos, source_task=sources)

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Class ids (ascending) and the row-normalized prototype matrix."""
        ids = np.array(sorted(self.prototypes), dtype=np.int64)
        stack = np.stack([self.prototypes[int(c)] for c in ids])
        stack, _ = _normalize_rows(stack, "prototypes")
        return ids, stack


def compute_prototypes(adapter: AdapterModule, backbone: Backbone,
                       data, class_ids=None) -> PrototypeBank:
    """Mean adapted train feature per class under the given adapter."""
    wanted = sorted(class_ids) if class_ids is not None else \
        sorted(int(c) for c in np.unique(data.train_y))
    z = adapted_features(data.train_x, adapter, backbone)
    protos, sources = {}, {}
    for cid in wanted:
        mask = data.train_y == cid
        if not mask.any():
            raise ConfigError(f"class {cid} has no training samples")
        protos[int(cid)] = z[mask].mean(axis=0)
        sources[int(cid)] = adapter.meta.task_id
    return PrototypeBank(prototypes=protos, source_task=sources)


def classify_batch(x: np.ndarray, adapter: AdapterModule, backbone: Backbone,
                   bank: PrototypeBank) -> np.ndarray:
    """Cosine nearest-prototype labels; ties resolve to the lowest class id."""
    ids, protos = bank.matrix()
    z = adapted_features(x, adapter, backbone)
    f, _ = _normalize_rows(z, "features")
    scores = f @ protos.T
    return ids[np.argmax(scores, axis=1)]


def classify(x: np.ndarray, adapter: AdapterModule, backbone: Backbone,
             bank: PrototypeBank) -> int:
    """Single-sample form of classify_batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] != 1:
        raise ShapeError("classify expects a single sample; use classify_batch")
    return int(classify_batch(x, adapter, backbone, bank)[0])


def _predict_across_banks(x, adapters, backbone, banks) -> np.ndarray:
    """Best cosine score across per-task prototype banks (no merging)."""
    columns, ids = [], []
    for adapter, bank in zip(adapters, banks):
        bank_ids, protos = bank.matrix()
        f, _ = _normalize_rows(adapted_features(x, adapter, backbone), "features")
        columns.append(f @ protos.T)
        ids.append(bank_ids)
    ids = np.concatenate(ids)
    scores = np.concatenate(columns, axis=1)
    order = np.argsort(ids, kind="stable")  # lowest class id wins ties
    return ids[order][np.argmax(scores[:, order], axis=1)]


def run_sequence(stream: TaskStream, strategy: Strategy, cfg: TrainConfig,
                 merge_cfg: MergeConfig | None = None, *,
                 return_adapters: bool = False):
    """Run one continual-learning pass over the stream.

    After each task the strategy-specific model absorbs the new adapter,
    prototypes for the task's classes are recorded under the current
    model, and accuracy is measured task-agnostically over all test data
    seen so far. The report is bit-reproducible given (stream seed, train
    seed, config, strategy); only its timing block varies between runs.

    Returns the RunReport, plus the deployable adapter list when
    return_adapters is set (one merged module, or one per task for the
    per-task strategy).
    """
    if not isinstance(strategy, Strategy):
        raise ConfigError(f"unknown strategy {strategy!r}")
    merge_cfg = MergeConfig() if merge_cfg is None else merge_cfg
    spec = stream.spec
    t_total = len(stream.tasks)
    t0 = spec.total_classes / spec.num_tasks
    backbone = Backbone.from_seed(
        stream.tasks[0].data.train_x.shape[1], BACKBONE_DIM,
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0, 0)))

    svd_start = SVD_CALLS.value
    started = time.perf_counter()
    acc_matrix: list[list[float | None]] = [[None] * t_total for _ in range(t_total)]
    step_acc: list[float] = []
    merge_ms: list[float] = []
    merged: AdapterModule | None = None
    bank: PrototypeBank | None = None
    adapters: list[AdapterModule] = []
    banks: list[PrototypeBank] = []

    for idx, task in enumerate(stream.tasks):
        if strategy is Strategy.SINGLE_FINETUNE:
            merged = train_task(task, backbone, cfg, t0=t0, init=merged)
            merge_ms.append(0.0)
        else:
            new = train_task(task, backbone, cfg, t0=t0)
            tick = time.perf_counter()
            if strategy is Strategy.ONE_A:
                merged = merge_modules(new, merged, merge_cfg)
            elif strategy is Strategy.AVERAGE:
                merged = new if merged is None else merge_average(new, merged, idx)
            elif strategy is Strategy.SYMMETRIC:
                if merged is None:
                    merged = new
                else:
                    w_b, w_a = info_weights(merged.meta, new.meta,
                                            merged.layers[0], new.layers[0],
                                            merge_cfg)
                    merged = merge_symmetric(new, merged, w_b, w_a, merge_cfg)
            else:
                adapters.append(new)
            merge_ms.append((time.perf_counter() - tick) * 1000.0)

        if strategy is Strategy.PER_TASK:
            banks.append(compute_prototypes(adapters[-1], backbone, task.data,
                                            class_ids=task.meta.class_ids))
        else:
            fresh = compute_prototypes(merged, backbone, task.data,
                                       class_ids=task.meta.class_ids)
            bank = fresh if bank is None else bank.updated(fresh)

        seen = stream.tasks[:idx + 1]
        eval_x = np.concatenate([t.data.test_x for t in seen])
        eval_y = np.concatenate([t.data.test_y for t in seen])
        if strategy is Strategy.PER_TASK:
            preds = _predict_across_banks(eval_x, adapters, backbone, banks)
        else:
            preds = classify_batch(eval_x, merged, backbone, bank)
        correct = preds == eval_y
        step_acc.append(float(np.mean(correct)))
        offset = 0
        for j, seen_task in enumerate(seen):
            width = seen_task.data.test_x.shape[0]
            acc_matrix[j][idx] = float(np.mean(correct[offset:offset + width]))
            offset += width

    config_echo = {
        **spec.to_dict(),
        "lr": cfg.lr, "epochs_base": cfg.epochs_base,
        "epochs_min": cfg.epochs_min, "epochs_max": cfg.epochs_max,
        "beta": cfg.beta, "lambda_min": cfg.lambda_min,
        "lambda_max": cfg.lambda_max, "k_decay": cfg.k_decay,
        "tau_margin": cfg.tau_margin, "batch_size": cfg.batch_size,
        "bottleneck": cfg.bottleneck, "cosine_lr": cfg.cosine_lr,
        "quantile_q": merge_cfg.quantile_q,
        "kappa": merge_cfg.sharpness_kappa, "delta": merge_cfg.delta,
        "rank_eps": merge_cfg.rank_eps, "info_proxy": merge_cfg.info_proxy.value,
    }
    config_echo.pop("seed")
    report = RunReport(
        strategy=strategy.value,
        stream_seed=spec.seed,
        train_seed=cfg.seed,
        class_counts=[t.meta.class_count for t in stream.tasks],
        acc_matrix=acc_matrix,
        step_acc=step_acc,
        config=config_echo,
        svd_calls=SVD_CALLS.value - svd_start,
        timings={"merge_ms": merge_ms,
                 "total_s": time.perf_counter() - started},
    )
    if return_adapters:
        return report, (adapters if strategy is Strategy.PER_TASK else [merged])
    return report

"""Training loop, optimizers, evaluation, and the experiment protocols.

One run: seeded init, shuffled mini-batches, per-epoch validation, and a
best-epoch checkpoint chosen by the variant's selection metric (validation
accuracy for the classifier, validation Dice for the segmenter, validation
multitask loss for the combined network).  Non-finite losses or gradients
abort the run; the last good checkpoint survives in the raised error.

Protocols on top of the loop: a positive-class-weight sweep under K-fold
cross-validation, a task-weight grid on a holdout split, and a variant
ablation.  All three emit rows over the same column schema with ``None``
for fields a run does not produce.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import DatasetManifest, SplitSpec, load_arrays, split
from .loss import LossWeights, dice_loss, dice_loss_op, multitask_loss, ns_wbce, ns_wbce_op
from .metrics import (
    MetricsReport,
    classify_confusion,
    kfold_aggregate,
    report_from_parts,
    seg_scores,
)
from .model import (
    EMT_NET,
    SINGLE_CLF,
    SINGLE_SGM,
    VARIANTS,
    NetworkGraph,
    WeightStore,
    assemble,
    count_params,
    default_input_size,
    graph_from_store,
    init_weights,
)

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "RunRecord",
    "SGD",
    "Adam",
    "make_optimizer",
    "optimizer_step",
    "train",
    "evaluate",
    "sweep_wp",
    "sweep_grid",
    "ablation",
    "DEFAULT_WP_VALUES",
    "DEFAULT_GRID_VALUES",
    "ROW_COLUMNS",
    "write_rows",
]

# sweep defaults: 1 to 5 by halves, then 6 to 10 by ones
DEFAULT_WP_VALUES = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0)
DEFAULT_GRID_VALUES = (1.0, 1.5, 2.0, 2.5, 3.0)

ROW_COLUMNS = ("w_p", "w_clf", "acc", "sen", "spe", "dsc", "iou")


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient goes non-finite.

    ``checkpoint`` holds the last good weights (None if the run never
    completed an epoch); ``record`` holds the partial run history.
    """

    def __init__(self, message, checkpoint=None, record=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.record = record


@dataclass
class TrainConfig:
    variant: str = EMT_NET
    width: str = "full"
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    w_p: float = 3.0
    w_clf: float = 1.5
    threshold: float = 0.5
    seed: int = 42

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.width not in ("full", "toy"):
            raise ValueError(f"unknown width {self.width!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        LossWeights(self.w_p, self.w_clf)  # validates both

    @property
    def input_size(self) -> int:
        return default_input_size(self.width)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_p, self.w_clf)


@dataclass
class RunRecord:
    """Per-run history: epoch curves, the selected epoch, and wall time."""

    variant: str
    seed: int
    selection: str
    epochs_run: int = 0
    best_epoch: int = -1
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    wall_seconds: float = 0.0
    diverged: bool = False

    def history_rows(self):
        for e in range(self.epochs_run):
            yield {
                "epoch": e,
                "train_loss": self.train_loss[e],
                "val_loss": self.val_loss[e],
                "val_metric": self.val_metric[e],
            }


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def _checked_grad(name, p):
    g = p.grad
    if g is None:
        return None
    if not np.all(np.isfinite(g)):
        raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
    return np.asarray(g, dtype=np.float64)


class SGD:
    """Momentum SGD: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = {}

    def step(self, named_params):
        for name, p in named_params:
            g = _checked_grad(name, p)
            if g is None:
                continue
            v = self.momentum * self.velocity.get(name, 0.0) + g
            self.velocity[name] = v
            p.data = (p.data - self.lr * v).astype(p.data.dtype)


class Adam:
    """Adam with bias correction; moments in float64 regardless of param dtype."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, named_params):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in named_params:
            g = _checked_grad(name, p)
            if g is None:
                continue
            m = b1 * self.m.get(name, 0.0) + (1.0 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1.0 - b2) * g * g
            self.m[name] = m
            self.v[name] = v
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    return SGD(config.learning_rate, config.momentum)


def optimizer_step(optimizer, named_params):
    """One in-place update; parameters without gradients stay untouched."""
    optimizer.step(list(named_params))


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _batch_loss_graph(graph, out, yb, mb, config):
    """Compose the variant's training loss as a scalar graph node."""
    if graph.variant == SINGLE_CLF:
        return ns_wbce_op(out.class_logit, yb, config.w_p)
    if graph.variant == SINGLE_SGM:
        return dice_loss_op(out.mask_prob, mb)
    l_clf = ns_wbce_op(out.class_logit, yb, config.w_p)
    l_seg = dice_loss_op(out.mask_prob, mb)
    return T.add(T.scale(l_clf, config.w_clf), l_seg)


def _eval_arrays(graph, X, M, y, threshold=0.5, batch_size=16, with_loss=False, config=None):
    """Inference over arrays; returns (MetricsReport, val_loss or None)."""
    n = X.shape[0]
    probs, dscs, ious = [], [], []
    loss_parts = []
    with T.no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            out = graph.apply(T.Tensor(X[lo:hi]), "infer")
            if graph.has_clf:
                probs.append(out.class_prob.data.reshape(-1).copy())
            if graph.has_seg:
                mp = out.mask_prob.data
                for i in range(hi - lo):
                    d, j = seg_scores(mp[i, 0], M[lo + i, 0], threshold)
                    dscs.append(d)
                    ious.append(j)
            if with_loss:
                l_clf = ns_wbce(out.class_logit.data, y[lo:hi, None], config.w_p)[0] if graph.has_clf else None
                l_seg = dice_loss(out.mask_prob.data, M[lo:hi])[0] if graph.has_seg else None
                if graph.variant == SINGLE_CLF:
                    total = l_clf
                elif graph.variant == SINGLE_SGM:
                    total = l_seg
                else:
                    total = multitask_loss(l_clf, l_seg, config.w_clf)
                loss_parts.append((total, hi - lo))
    confusion = classify_confusion(np.concatenate(probs), y, threshold) if probs else None
    report = report_from_parts(confusion, dscs, ious, n_samples=n)
    val_loss = None
    if with_loss:
        val_loss = float(sum(l * w for l, w in loss_parts) / sum(w for _, w in loss_parts))
    return report, val_loss


_SELECTION = {EMT_NET: "val_loss", SINGLE_CLF: "val_acc", SINGLE_SGM: "val_dsc"}


def _selection_value(variant, report, val_loss):
    if variant == SINGLE_CLF:
        return report.acc
    if variant == SINGLE_SGM:
        return report.dsc
    return val_loss


def _improved(variant, candidate, best):
    if candidate is None:
        return False
    if best is None:
        return True
    return candidate < best if variant == EMT_NET else candidate > best


def train(config: TrainConfig, manifest=None, assignment=None, arrays=None, log=None):
    """One training run; returns ``(RunRecord, WeightStore)`` of the best epoch.

    Data comes either from a manifest (loaded at the config's input size) or
    from preloaded ``arrays=(X, M, y)``.  ``assignment`` is a dict of
    train/val/test index arrays; by default a seeded 70/15/15 holdout.
    Raises TrainingDiverged on non-finite loss or gradients, carrying the
    last good checkpoint.
    """
    if arrays is None:
        if manifest is None:
            raise ValueError("train needs a manifest or preloaded arrays")
        arrays = load_arrays(manifest, config.input_size)
    X, M, y = arrays
    if X.shape[0] != y.shape[0] or M.shape[0] != y.shape[0]:
        raise ValueError("train: arrays disagree on the number of samples")
    if assignment is None:
        assignment = split(range(X.shape[0]), SplitSpec.holdout(seed=config.seed))[0]
    idx_train = np.asarray(assignment["train"], dtype=np.int64)
    idx_val = np.asarray(assignment["val"], dtype=np.int64)
    if idx_train.size == 0 or idx_val.size == 0:
        raise ValueError("train: empty train or validation subset")

    graph = assemble(config.variant, config.width)
    init_weights(graph, seed=config.seed)
    params = list(graph.named_params())
    optimizer = make_optimizer(config)
    ss = np.random.SeedSequence(config.seed)
    shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    record = RunRecord(config.variant, config.seed, _SELECTION[config.variant])
    best_value = None
    best_state = None
    started = time.monotonic()

    def fail(message):
        record.diverged = True
        record.wall_seconds = time.monotonic() - started
        checkpoint = WeightStore(best_state, graph.meta()) if best_state is not None else None
        raise TrainingDiverged(message, checkpoint=checkpoint, record=record)

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(idx_train)
        epoch_loss = 0.0
        for lo in range(0, order.size, config.batch_size):
            batch = order[lo:lo + config.batch_size]
            for _, p in params:
                p.zero_grad()
            out = graph.apply(T.Tensor(X[batch]), "train", rng=dropout_rng)
            total = _batch_loss_graph(graph, out, y[batch, None], M[batch], config)
            value = total.item()
            if not np.isfinite(value):
                fail(f"loss became non-finite at epoch {epoch}, step {lo // config.batch_size}")
            total.backward()
            try:
                optimizer.step(params)
            except TrainingDiverged as exc:
                fail(f"{exc} (epoch {epoch}, step {lo // config.batch_size})")
            epoch_loss += value * batch.size
        record.train_loss.append(epoch_loss / order.size)

        val_report, val_loss = _eval_arrays(
            graph, X[idx_val], M[idx_val], y[idx_val],
            threshold=config.threshold, with_loss=True, config=config,
        )
        record.val_loss.append(val_loss)
        candidate = _selection_value(config.variant, val_report, val_loss)
        record.val_metric.append(candidate)
        record.epochs_run = epoch + 1
        if _improved(config.variant, candidate, best_value):
            best_value = candidate
            best_state = graph.state_dict()
            record.best_epoch = epoch
        if log is not None:
            extra = "" if record.selection == "val_loss" else f" {record.selection}={candidate}"
            log(f"epoch {epoch}: train_loss={record.train_loss[-1]:.4f} "
                f"val_loss={val_loss:.4f}{extra}")

    record.wall_seconds = time.monotonic() - started
    graph.load_state_dict(best_state)
    return record, WeightStore(best_state, graph.meta())


def evaluate(model, manifest=None, arrays=None, threshold: float = 0.5,
             batch_size: int = 16) -> MetricsReport:
    """Score a graph or weight store on a dataset; absent heads give None."""
    graph = graph_from_store(model) if isinstance(model, WeightStore) else model
    if not isinstance(graph, NetworkGraph):
        raise TypeError(f"evaluate expects a NetworkGraph or WeightStore, got {type(model)!r}")
    if arrays is None:
        if manifest is None:
            raise ValueError("evaluate needs a manifest or preloaded arrays")
        arrays = load_arrays(manifest, graph.input_size)
    X, M, y = arrays
    report, _ = _eval_arrays(graph, X, M, y, threshold=threshold, batch_size=batch_size)
    return report


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def _row(w_p=None, w_clf=None, report=None):
    row = {k: None for k in ROW_COLUMNS}
    row["w_p"] = w_p
    row["w_clf"] = w_clf
    if report is not None:
        for k in MetricsReport.FIELDS:
            row[k] = getattr(report, k)
    return row


def sweep_wp(config: TrainConfig, manifest=None, values=DEFAULT_WP_VALUES,
             arrays=None, log=None):
    """Positive-class-weight sweep for the classifier variant.

    Each value is cross-validated: K=4 folds from the config seed, train on
    each fold's training part, score its test part, average the fold
    reports.  Returns one schema-stable row per value.
    """
    if arrays is None:
        if manifest is None:
            raise ValueError("sweep_wp needs a manifest or preloaded arrays")
        arrays = load_arrays(manifest, config.input_size)
    n = arrays[0].shape[0]
    assignments = split(range(n), SplitSpec.kfold(4, seed=config.seed))
    rows = []
    for w_p in values:
        cfg = replace(config, variant=SINGLE_CLF, w_p=float(w_p))
        reports = []
        for fold, assign in enumerate(assignments):
            _, store = train(cfg, arrays=arrays, assignment=assign)
            graph = graph_from_store(store)
            idx = assign["test"]
            report = evaluate(graph, arrays=(arrays[0][idx], arrays[1][idx], arrays[2][idx]),
                              threshold=cfg.threshold)
            reports.append(report)
            if log is not None:
                log(f"w_p={w_p} fold {fold}: acc={report.acc}")
        rows.append(_row(w_p=float(w_p), report=kfold_aggregate(reports)))
    return rows


def sweep_grid(config: TrainConfig, manifest=None, w_clf_values=DEFAULT_GRID_VALUES,
               w_p_values=DEFAULT_GRID_VALUES, arrays=None, log=None):
    """Task-weight grid for the combined network on a seeded holdout split."""
    if arrays is None:
        if manifest is None:
            raise ValueError("sweep_grid needs a manifest or preloaded arrays")
        arrays = load_arrays(manifest, config.input_size)
    n = arrays[0].shape[0]
    assignment = split(range(n), SplitSpec.holdout(seed=config.seed))[0]
    idx = assignment["test"]
    test_arrays = (arrays[0][idx], arrays[1][idx], arrays[2][idx])
    rows = []
    for w_clf in w_clf_values:
        for w_p in w_p_values:
            cfg = replace(config, variant=EMT_NET, w_p=float(w_p), w_clf=float(w_clf))
            _, store = train(cfg, arrays=arrays, assignment=assignment)
            report = evaluate(graph_from_store(store), arrays=test_arrays, threshold=cfg.threshold)
            rows.append(_row(w_p=float(w_p), w_clf=float(w_clf), report=report))
            if log is not None:
                log(f"w_clf={w_clf} w_p={w_p}: acc={report.acc} dsc={report.dsc}")
    return rows


def ablation(config: TrainConfig, manifest=None, arrays=None, log=None):
    """Train all three variants on the same seeded holdout; one row each,
    with parameter counts and serialized weight size next to the metrics."""
    if arrays is None:
        if manifest is None:
            raise ValueError("ablation needs a manifest or preloaded arrays")
        arrays = load_arrays(manifest, config.input_size)
    n = arrays[0].shape[0]
    assignment = split(range(n), SplitSpec.holdout(seed=config.seed))[0]
    idx = assignment["test"]
    test_arrays = (arrays[0][idx], arrays[1][idx], arrays[2][idx])
    rows = []
    for variant in (SINGLE_CLF, SINGLE_SGM, EMT_NET):
        cfg = replace(config, variant=variant)
        _, store = train(cfg, arrays=arrays, assignment=assignment)
        graph = graph_from_store(store)
        report = evaluate(graph, arrays=test_arrays, threshold=cfg.threshold)
        row = _row(w_p=cfg.w_p, w_clf=cfg.w_clf if variant == EMT_NET else None, report=report)
        row["variant"] = variant
        row["params"] = count_params(graph)
        row["size_bytes"] = store.nbytes()
        rows.append(row)
        if log is not None:
            log(f"{variant}: params={row['params']} acc={report.acc} dsc={report.dsc}")
    return rows


def write_rows(rows, stream, columns=None):
    """CSV with a fixed column order; None becomes the literal ``NA``."""
    if columns is None:
        columns = list(rows[0].keys()) if rows else list(ROW_COLUMNS)
    stream.write(",".join(columns) + "\n")
    for row in rows:
        cells = []
        for c in columns:
            v = row.get(c)
            if v is None:
                cells.append("NA")
            elif isinstance(v, float):
                cells.append(f"{v:.6g}")
            else:
                cells.append(str(v))
        stream.write(",".join(cells) + "\n")

"""Training loop, optimizers, evaluation, and the sweep protocols."""

import io

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

import emtnet.tensor as T
from emtnet.data import load_arrays, synth_generate
from emtnet.loss import LossWeights, dice_loss, ns_wbce
from emtnet.model import assemble, graph_from_store, init_weights
from emtnet.trainer import (
    DEFAULT_GRID_VALUES,
    DEFAULT_WP_VALUES,
    ROW_COLUMNS,
    Adam,
    RunRecord,
    SGD,
    TrainConfig,
    TrainingDiverged,
    ablation,
    evaluate,
    make_optimizer,
    optimizer_step,
    sweep_grid,
    sweep_wp,
    train,
    write_rows,
)


# ---------------------------------------------------------------------------
# shared datasets (module scope: synthesis and training are the slow parts)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_arrays(tmp_path_factory):
    """16 balanced 64px samples; enough for one-epoch protocol runs."""
    root = tmp_path_factory.mktemp("tiny")
    man = synth_generate(16, seed=5, out_dir=root, image_size=64,
                         malignant_fraction=0.5)
    return load_arrays(man, 64)


@pytest.fixture(scope="module")
def balanced_arrays(tmp_path_factory):
    root = tmp_path_factory.mktemp("balanced")
    man = synth_generate(24, seed=5, out_dir=root, image_size=64,
                         malignant_fraction=0.5)
    return load_arrays(man, 64)


@pytest.fixture(scope="module")
def memorization_run(tmp_path_factory):
    """Train a toy multitask net with every sample in all three parts.

    The returned record/store pair backs several assertions below, so the
    one genuinely slow fit in this file happens only once.
    """
    root = tmp_path_factory.mktemp("memo")
    man = synth_generate(128, seed=42, out_dir=root, image_size=64)
    arrays = load_arrays(man, 64)
    idx = np.arange(128)
    assignment = {"train": idx, "val": idx, "test": idx}
    config = TrainConfig(variant="emt-net", width="toy", epochs=30, seed=42)
    record, store = train(config, arrays=arrays, assignment=assignment)
    return config, record, store, arrays


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_config_defaults():
    c = TrainConfig()
    assert c.variant == "emt-net"
    assert c.width == "full"
    assert c.epochs == 30
    assert c.batch_size == 8
    assert c.learning_rate == 1e-3
    assert c.optimizer == "adam"
    assert (c.w_p, c.w_clf) == (3.0, 1.5)
    assert c.threshold == 0.5
    assert c.seed == 42
    assert c.input_size == 224
    assert c.loss_weights == LossWeights(3.0, 1.5)


def test_toy_config_input_size():
    assert TrainConfig(width="toy").input_size == 64


@pytest.mark.parametrize("kwargs", [
    {"variant": "vgg16"},
    {"width": "half"},
    {"epochs": 0},
    {"batch_size": 0},
    {"learning_rate": 0.0},
    {"learning_rate": -1e-3},
    {"optimizer": "rmsprop"},
    {"threshold": 0.0},
    {"threshold": 1.0},
    {"w_p": 0.0},
    {"w_clf": -1.0},
])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_default_sweep_values():
    assert DEFAULT_WP_VALUES == (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5,
                                 5.0, 6.0, 7.0, 8.0, 9.0, 10.0)
    assert len(DEFAULT_WP_VALUES) == 14
    assert DEFAULT_GRID_VALUES == (1.0, 1.5, 2.0, 2.5, 3.0)
    assert ROW_COLUMNS == ("w_p", "w_clf", "acc", "sen", "spe", "dsc", "iou")


def test_history_rows():
    rec = RunRecord(variant="emt-net", seed=1, selection="val_loss",
                    epochs_run=2, train_loss=[1.0, 0.5],
                    val_loss=[0.9, 0.6], val_metric=[0.9, 0.6])
    rows = list(rec.history_rows())
    assert [r["epoch"] for r in rows] == [0, 1]
    assert rows[1] == {"epoch": 1, "train_loss": 0.5, "val_loss": 0.6,
                       "val_metric": 0.6}


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def _param(*values):
    return T.Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def test_sgd_single_step():
    p = _param(1.0)
    opt = SGD(lr=0.1)
    p.grad = 2.0 * p.data
    optimizer_step(opt, [("x", p)])
    assert np.allclose(p.data, [0.8])


def test_sgd_momentum_accumulates():
    p = _param(1.0)
    opt = SGD(lr=0.1, momentum=0.9)
    p.grad = np.array([1.0])
    optimizer_step(opt, [("x", p)])
    assert np.allclose(p.data, [0.9])
    p.grad = np.array([1.0])
    optimizer_step(opt, [("x", p)])
    # velocity 0.9*1 + 1 = 1.9, so the second step moves 0.19
    assert np.allclose(p.data, [0.71])


def test_adam_quadratic_converges():
    p = _param(1.0)
    opt = Adam(lr=0.1)
    for _ in range(200):
        p.grad = 2.0 * p.data
        optimizer_step(opt, [("x", p)])
    assert abs(float(p.data[0])) < 1e-2


def test_adam_zero_gradient_is_a_no_op():
    p = _param(3.0, -2.0)
    opt = Adam(lr=0.5)
    p.grad = np.zeros(2)
    optimizer_step(opt, [("p", p)])
    assert np.array_equal(p.data, [3.0, -2.0])


def test_missing_gradient_leaves_param_untouched():
    p = _param(7.0)
    opt = SGD(lr=10.0, momentum=0.9)
    optimizer_step(opt, [("p", p)])
    assert np.array_equal(p.data, [7.0])
    assert "p" not in opt.velocity


def test_nan_gradient_aborts_and_names_the_parameter():
    p = _param(1.0)
    p.grad = np.array([np.nan])
    opt = Adam(lr=0.1)
    with pytest.raises(TrainingDiverged, match="non-finite gradient in parameter 'enc.w'"):
        optimizer_step(opt, [("enc.w", p)])


def test_adam_preserves_param_dtype():
    p = T.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    opt = Adam(lr=0.1)
    p.grad = np.array([0.5])
    optimizer_step(opt, [("p", p)])
    assert p.data.dtype == np.float32


def test_make_optimizer_reads_config():
    adam = make_optimizer(TrainConfig(learning_rate=5e-4, beta2=0.98))
    assert isinstance(adam, Adam)
    assert adam.lr == 5e-4 and adam.beta2 == 0.98
    sgd = make_optimizer(TrainConfig(optimizer="sgd", momentum=0.7))
    assert isinstance(sgd, SGD)
    assert sgd.momentum == 0.7


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------

def test_train_loss_decreases(tmp_path):
    man = synth_generate(64, seed=9, out_dir=tmp_path, image_size=64)
    arrays = load_arrays(man, 64)
    config = TrainConfig(variant="emt-net", width="toy", epochs=10, seed=1)
    record, store = train(config, arrays=arrays)
    assert record.epochs_run == 10
    assert record.train_loss[-1] < record.train_loss[0]
    assert not record.diverged
    assert record.wall_seconds > 0
    assert store.meta["variant"] == "emt-net"


def test_single_sgm_never_builds_classifier(tiny_arrays):
    config = TrainConfig(variant="single-sgm", width="toy", epochs=2, seed=4)
    record, store = train(config, arrays=tiny_arrays)
    assert record.selection == "val_dsc"
    graph = graph_from_store(store)
    names = [n for n, _ in graph.named_params()]
    assert names and not any(n.startswith("clf.") for n in names)
    report = evaluate(graph, arrays=tiny_arrays)
    assert report.acc is None and report.sen is None and report.spe is None
    assert report.dsc is not None


def test_single_clf_selects_on_accuracy(tiny_arrays):
    config = TrainConfig(variant="single-clf", width="toy", epochs=1, seed=4)
    record, _ = train(config, arrays=tiny_arrays)
    assert record.selection == "val_acc"
    assert record.epochs_run == 1
    assert 0.0 <= record.val_metric[0] <= 1.0


def test_unit_weights_degenerate_to_plain_sum(tiny_arrays):
    """With w_p=1 and w_clf=1 the multitask loss is BCE plus Dice, unweighted."""
    X, M, y = tiny_arrays
    graph = assemble("emt-net", "toy")
    init_weights(graph, seed=0)
    xb = T.Tensor(X[:4])
    out = graph.apply(xb, mode="infer")
    logits = out.class_logit.data.astype(np.float64).ravel()
    probs = out.mask_prob.data.astype(np.float64)
    bce, _ = ns_wbce(logits, y[:4], w_p=1.0)
    dice, _ = dice_loss(probs, M[:4])
    expected = bce + dice

    from emtnet.trainer import _batch_loss_graph
    config = TrainConfig(variant="emt-net", width="toy", w_p=1.0, w_clf=1.0)
    node = _batch_loss_graph(graph, out, y[:4, None], M[:4], config)
    assert float(node.data) == pytest.approx(expected, rel=1e-6)


def test_divergence_keeps_last_good_checkpoint(tiny_arrays):
    config = TrainConfig(variant="single-clf", width="toy", epochs=6,
                         optimizer="sgd", learning_rate=100.0, seed=3)
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingDiverged, match="non-finite") as exc_info:
            train(config, arrays=tiny_arrays)
    exc = exc_info.value
    assert exc.record is not None and exc.record.diverged
    assert exc.record.epochs_run >= 1
    assert exc.checkpoint is not None
    graph = graph_from_store(exc.checkpoint)
    for name, p in graph.named_params():
        assert np.all(np.isfinite(p.data)), name


def test_divergence_inside_first_epoch_names_the_layer(tiny_arrays):
    config = TrainConfig(variant="single-clf", width="toy", epochs=2,
                         optimizer="sgd", learning_rate=1e9, seed=3)
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingDiverged, match=r"parameter 'encoder\.") as exc_info:
            train(config, arrays=tiny_arrays)
    assert exc_info.value.checkpoint is None


def test_training_is_deterministic(tiny_arrays):
    config = TrainConfig(variant="single-clf", width="toy", epochs=2, seed=8)
    with threadpool_limits(1):
        rec_a, store_a = train(config, arrays=tiny_arrays)
        rec_b, store_b = train(config, arrays=tiny_arrays)
    assert rec_a.train_loss == rec_b.train_loss
    assert rec_a.val_metric == rec_b.val_metric
    assert store_a == store_b  # bitwise on every tensor, plus metadata


def test_memorization_scores(memorization_run):
    _, record, store, arrays = memorization_run
    report = evaluate(store, arrays=arrays)
    assert report.acc >= 0.95
    assert report.dsc >= 0.80


def test_memorization_record_invariants(memorization_run):
    config, record, _, _ = memorization_run
    assert record.epochs_run == config.epochs
    assert len(record.train_loss) == config.epochs
    assert len(record.val_loss) == config.epochs
    assert record.selection == "val_loss"
    assert 0 <= record.best_epoch < config.epochs
    rows = list(record.history_rows())
    assert len(rows) == config.epochs
    assert set(rows[0]) == {"epoch", "train_loss", "val_loss", "val_metric"}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def test_untrained_model_scores_near_chance(balanced_arrays):
    for seed in range(5):
        graph = assemble("single-clf", "toy")
        init_weights(graph, seed=seed)
        report = evaluate(graph, arrays=balanced_arrays)
        assert 0.3 <= report.acc <= 0.7, f"seed {seed}: acc {report.acc}"


def test_evaluate_is_bitwise_repeatable(balanced_arrays):
    graph = assemble("emt-net", "toy")
    init_weights(graph, seed=2)
    first = evaluate(graph, arrays=balanced_arrays)
    second = evaluate(graph, arrays=balanced_arrays)
    assert first.as_dict() == second.as_dict()


def test_evaluate_accepts_store_or_graph(memorization_run):
    _, _, store, arrays = memorization_run
    from_store = evaluate(store, arrays=arrays)
    from_graph = evaluate(graph_from_store(store), arrays=arrays)
    assert from_store.as_dict() == from_graph.as_dict()


def test_evaluate_rejects_other_model_types(balanced_arrays):
    with pytest.raises(TypeError):
        evaluate("a path string", arrays=balanced_arrays)


# ---------------------------------------------------------------------------
# sweep protocols
# ---------------------------------------------------------------------------

def test_wp_sweep_rows(tiny_arrays):
    config = TrainConfig(variant="emt-net", width="toy", epochs=1, seed=11)
    rows = sweep_wp(config, arrays=tiny_arrays, values=(1.0, 2.0))
    assert len(rows) == 2
    assert [r["w_p"] for r in rows] == [1.0, 2.0]
    for row in rows:
        assert tuple(row) == ROW_COLUMNS
        # classification-only protocol: no decoder, no overlap scores
        assert row["w_clf"] is None
        assert row["dsc"] is None and row["iou"] is None
        for key in ("acc", "sen", "spe"):
            assert 0.0 <= row[key] <= 1.0


def test_grid_sweep_rows(tiny_arrays):
    config = TrainConfig(variant="emt-net", width="toy", epochs=1, seed=11)
    rows = sweep_grid(config, arrays=tiny_arrays,
                      w_p_values=(1.0, 3.0), w_clf_values=(1.5, 2.0))
    assert len(rows) == 4
    # w_clf is the outer axis, w_p the inner one
    assert [(r["w_clf"], r["w_p"]) for r in rows] == [
        (1.5, 1.0), (1.5, 3.0), (2.0, 1.0), (2.0, 3.0)]
    for row in rows:
        assert tuple(row) == ROW_COLUMNS
        assert row["dsc"] is not None and row["iou"] is not None


def test_ablation_rows(tiny_arrays):
    config = TrainConfig(variant="emt-net", width="toy", epochs=1, seed=11)
    rows = ablation(config, arrays=tiny_arrays)
    by_variant = {r["variant"]: r for r in rows}
    assert list(by_variant) == ["single-clf", "single-sgm", "emt-net"]
    clf, sgm, emt = (by_variant[v] for v in by_variant)
    assert emt["params"] < clf["params"] + sgm["params"]
    for row in rows:
        assert row["size_bytes"] > 4 * row["params"]  # buffers ride along
        assert row["size_bytes"] % 4 == 0
    assert clf["w_clf"] is None and sgm["w_clf"] is None
    assert emt["w_clf"] == config.w_clf
    assert clf["dsc"] is None and sgm["acc"] is None
    assert emt["acc"] is not None and emt["dsc"] is not None


def test_ablation_is_repeatable(tiny_arrays):
    config = TrainConfig(variant="emt-net", width="toy", epochs=1, seed=11)
    with threadpool_limits(1):
        first = ablation(config, arrays=tiny_arrays)
        second = ablation(config, arrays=tiny_arrays)
    assert first == second


def test_write_rows_formatting():
    rows = [
        {"w_p": 1.0, "w_clf": None, "acc": 0.875, "sen": 1.0, "spe": 0.0,
         "dsc": None, "iou": None},
        {"w_p": 2.5, "w_clf": 1.5, "acc": 1 / 3, "sen": 0.5, "spe": 0.25,
         "dsc": 0.1234567, "iou": 0.0654321},
    ]
    buf = io.StringIO()
    write_rows(rows, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "w_p,w_clf,acc,sen,spe,dsc,iou"
    assert lines[1] == "1,NA,0.875,1,0,NA,NA"
    assert lines[2].startswith("2.5,1.5,0.333333,")
    assert "0.123457" in lines[2]


def test_write_rows_custom_columns():
    buf = io.StringIO()
    write_rows([{"a": 1, "b": None}], buf, columns=("a", "b"))
    assert buf.getvalue() == "a,b\n1,NA\n"

"""Acceptance criteria; each test prints one PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from bsnet.autodiff import Adam, Parameter, grad_check, numeric_mode, set_numeric_mode
from bsnet.autodiff import functional as F
from bsnet.autodiff import tensor as T
from bsnet.backbones import Backbone, backbone_spec, embed
from bsnet.baseline import RelationNetwork, relation_loss, relation_predict
from bsnet.config import load_config
from bsnet.data import (
    Augment,
    SyntheticSpec,
    generate_synthetic,
    sample_episode,
    split_dataset,
)
from bsnet.engine import (
    TrainConfig,
    build_model,
    ci_half_width,
    combined_prediction,
    episode_result,
    episode_rng,
    evaluate,
    meta_train,
    per_head_prediction,
    predict,
    training_loss,
)
from bsnet.experiments import WEIGHT_ROWS, format_table, run_weight_sweep
from bsnet.heads import ClassContext, RelationHead
from bsnet.rademacher import (
    check_containment,
    check_theorem,
    constant_family,
    estimate_complexity,
    linear_toy_families,
)


def report(capsys, number, name, ok, detail=""):
    with capsys.disabled():
        print(f"\n[acceptance] criterion {number} ({name}): {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def synthetic_splits(images_per_class=30):
    ds = generate_synthetic(SyntheticSpec(n_classes=30, images_per_class=images_per_class, variation=0.15))
    return split_dataset(ds, (4, 1, 1), seed=0)


# -- 1. gradient suite --------------------------------------------------------------------------

def _primitive_cases(rng):
    x4 = rng.normal(size=(2, 3, 6, 6))
    mat = rng.normal(size=(3, 4))
    pos = rng.random((3, 4)) + 0.5
    labels = np.array([1, 0, 3])
    bn_mean, bn_var = np.zeros(3), np.ones(3)
    return {
        "add/mul/sub/div": (lambda a, b: ((a + b) * a - b / (b * b + 1.0)).sum(), [mat, mat[::-1].copy()]),
        "power/exp/log/sqrt/tanh": (lambda a: (a ** 3 + T.exp(a) + T.log(a) + T.sqrt(a) + T.tanh(a)).sum(), [pos]),
        "matmul": (lambda a, b: (a @ b).sum(), [mat, rng.normal(size=(4, 2))]),
        "sum/mean/reshape/transpose": (lambda a: (a.reshape(4, 3).transpose() * mat).mean(axis=0).sum(), [mat]),
        "getitem/concat/stack": (lambda a: (T.concat([a[:, :2], a], axis=1) * 1.5).sum()
                                 + T.stack([a[0], a[2]]).sum() * 0.5, [mat]),
        "conv2d pad1": (lambda x, w, b: (F.conv2d(x, w, b, padding=1) ** 2).sum(),
                        [x4, rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)]),
        "conv2d pad0": (lambda x, w: (F.conv2d(x, w, None, padding=0) ** 2).sum(),
                        [x4, rng.normal(size=(2, 3, 3, 3))]),
        "batchnorm2d train": (lambda x, g, b: (F.batchnorm2d(x, g, b, bn_mean.copy(), bn_var.copy(), True) ** 3).sum(),
                              [x4, rng.normal(size=3), rng.normal(size=3)]),
        "batchnorm2d eval": (lambda x, g, b: (F.batchnorm2d(x, g, b, np.full(3, 0.1), np.full(3, 2.0), False) ** 3).sum(),
                             [x4, rng.normal(size=3), rng.normal(size=3)]),
        "relu": (lambda x: (F.relu(x) ** 2).sum(), [x4]),
        "leaky_relu": (lambda x: (F.leaky_relu(x, 0.2) ** 2).sum(), [x4]),
        "sigmoid": (lambda x: (F.sigmoid(x * 3.0) ** 2).sum(), [mat]),
        "maxpool2d": (lambda x: (F.maxpool2d(x, 2) ** 2).sum(), [x4]),
        "maxpool2d odd": (lambda x: (F.maxpool2d(x, 2) ** 2).sum(), [rng.normal(size=(1, 2, 5, 5))]),
        "avgpool2d": (lambda x: (F.avgpool2d(x, 2) ** 2).sum(), [x4]),
        "linear": (lambda x, w, b: (F.linear(x, w, b) ** 2).sum(),
                   [mat, rng.normal(size=(5, 4)), rng.normal(size=5)]),
        "softmax": (lambda x: (F.softmax(x) * mat).sum(), [mat]),
        "log_softmax/logsumexp": (lambda x: (F.log_softmax(x) * mat).sum() + F.logsumexp(x).sum(), [mat]),
        "l2_normalize/cosine": (lambda a, b: (F.l2_normalize(a) * mat).sum() + F.cosine_similarity(a, b).sum(),
                                [mat, rng.normal(size=(3, 4))]),
        "topk_sum": (lambda x: F.topk_sum(x, 2).sum(), [mat]),
        "squared_error": (lambda x: F.squared_error(x, np.eye(4)[labels]).sum(), [mat]),
        "cross_entropy": (lambda x: F.cross_entropy(x, labels).sum(), [mat]),
    }


MODELS = (["prototype"], ["matching"], ["relation"], ["cosine"], ["image_to_class"], ["relation", "cosine"])


def test_criterion_1_gradient_suite(capsys):
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    failed = []
    with numeric_mode("float64"):
        for name, (fn, arrays) in _primitive_cases(rng).items():
            params = [Parameter(a.copy()) for a in arrays]
            rep = grad_check(lambda: fn(*params), params, tol=1e-3)
            worst = max(worst, rep.max_error)
            if not rep.passed:
                failed.append(name)
        ds = generate_synthetic(SyntheticSpec(n_classes=6, images_per_class=4, variation=0.15))
        for heads in MODELS:
            model = build_model("conv4", heads, seed=11)
            ep = sample_episode(ds, 2, 1, 1, np.random.default_rng(5))

            def loss():
                return training_loss(model(ep), ep.query_labels, model.loss_kinds, model.weights)

            rep = grad_check(loss, model.parameters(), tol=1e-3, max_coords=3, rng=np.random.default_rng(0))
            worst = max(worst, rep.max_error)
            if not rep.passed:
                failed.append("conv4+" + "&".join(heads))
    elapsed = time.perf_counter() - started
    ok = not failed and elapsed < 300
    report(capsys, 1, "gradient suite", ok,
           f"max relative error {worst:.2e}, failures {failed or 'none'}, {elapsed:.0f}s")
    assert ok


# -- 2. shape contracts -------------------------------------------------------------------------

def test_criterion_2_shape_contracts(capsys):
    rng = np.random.default_rng(0)
    img = np.zeros((1, 3, 84, 84))
    conv4 = embed(Backbone(backbone_spec("conv4"), rng), img).shape[1:]
    conv64f = embed(Backbone(backbone_spec("conv64f"), rng), img).shape[1:]
    head = RelationHead(rng)
    flat = head.fc1.weight.shape[1]
    pool1 = ClassContext(0, [np.zeros((64, 21, 21))]).descriptor_pool().shape[0]
    pool5 = ClassContext(0, [np.zeros((64, 21, 21))] * 5).descriptor_pool().shape[0]
    ok = conv4 == (64, 19, 19) and conv64f == (64, 21, 21) and flat == 576 and pool1 == 441 and pool5 == 2205
    report(capsys, 2, "shape contracts", ok,
           f"conv4 {conv4}, conv64f {conv64f}, relation flatten {flat}, pools {pool1}/{pool5}")
    assert conv4 == (64, 19, 19)
    assert conv64f == (64, 21, 21)
    assert flat == 576
    assert pool1 == 441 and pool5 == 2205


# -- 3. baseline equivalence ----------------------------------------------------------------------

def test_criterion_3_baseline_equivalence(capsys):
    set_numeric_mode("float32")
    train, _, _ = synthetic_splits(images_per_class=10)
    engine = build_model("conv4", ["relation"], seed=3)
    base = RelationNetwork(seed=3)
    opt_e, opt_b = Adam(engine.parameters()), Adam(base.parameters())
    mismatches = 0
    for i in range(100):
        ep = sample_episode(train, 5, 1, 2, episode_rng(3, 0, i), train_mode=True, augment=Augment())
        engine.train()
        base.train()
        opt_e.zero_grad()
        opt_b.zero_grad()
        scores = engine(ep)
        le = training_loss(scores, ep.query_labels, engine.loss_kinds, engine.weights)
        sb = base(ep)
        lb = relation_loss(sb, ep.query_labels)
        le.backward()
        lb.backward()
        opt_e.step()
        opt_b.step()
        pe = predict(np.stack([s.data for s in scores], axis=-1))
        pb = relation_predict(sb.data)
        same = le.data.tobytes() == lb.data.tobytes() and np.array_equal(pe, pb)
        if i % 10 == 9:
            engine.eval()
            base.eval()
            pe = predict(np.stack([s.data for s in engine(ep)], axis=-1))
            same = same and np.array_equal(pe, relation_predict(base(ep).data))
        mismatches += not same
    ok = mismatches == 0
    report(capsys, 3, "baseline equivalence", ok, f"{100 - mismatches}/100 episodes bitwise identical")
    assert ok


# -- 4. synthetic end to end ------------------------------------------------------------------------

TRAIN_EPISODES = 200
TRAIN_QUERY = 3
EVAL_EPISODES = 100
EVAL_QUERY = 16


def test_criterion_4_synthetic_end_to_end(capsys):
    started = time.perf_counter()
    set_numeric_mode("float32")
    train, val, test = synthetic_splits()
    assert (len(train.classes), len(val.classes), len(test.classes)) == (20, 5, 5)
    cfg = TrainConfig(n_way=5, k_shot=1, n_query=TRAIN_QUERY, episodes=TRAIN_EPISODES, seed=0,
                      augment=Augment(enabled=False))
    acc = {}
    for heads in (("relation", "cosine"), ("relation",), ("cosine",)):
        model = build_model("conv4", heads, seed=0)
        meta_train(model, train, cfg)
        acc["&".join(heads)] = evaluate(model, test, EVAL_EPISODES, 5, 1, EVAL_QUERY, seed=0).mean
    elapsed = time.perf_counter() - started
    bsnet = acc["relation&cosine"]
    worse = min(acc["relation"], acc["cosine"])
    ok = bsnet >= 0.85 and bsnet >= worse and elapsed < 1800
    detail = ", ".join(f"{k} {100 * v:.2f}%" for k, v in acc.items())
    report(capsys, 4, "synthetic end-to-end", ok, f"{detail}; {TRAIN_EPISODES} episodes; {elapsed:.0f}s")
    assert bsnet >= 0.85
    assert bsnet >= worse
    assert elapsed < 1800


# -- 5. prediction rule invariants ----------------------------------------------------------------

def test_criterion_5_prediction_invariants(capsys):
    rng = np.random.default_rng(55)
    bad = {"tie": 0, "relabel": 0, "h1": 0}
    for _ in range(10_000):
        q, c, h = rng.integers(1, 6), rng.integers(2, 8), rng.integers(1, 4)
        # coarse values make ties common
        coarse = rng.integers(0, 3, size=(q, c, h)).astype(float)
        for i in range(q):
            mean = coarse[i].mean(axis=1)
            first = int(np.flatnonzero(mean == mean.max())[0])
            pred = combined_prediction(coarse[i])
            if int(np.argmax(pred)) != first or not np.array_equal(pred, combined_prediction(coarse[i].copy())):
                bad["tie"] += 1
        fine = rng.normal(size=(q, c, h))
        labels = rng.integers(0, c, size=q)
        perm = rng.permutation(c)
        relabeled = np.empty_like(fine)
        relabeled[:, perm, :] = fine
        if episode_result(fine, labels).accuracy != episode_result(relabeled, perm[labels]).accuracy:
            bad["relabel"] += 1
        single = fine[:, :, :1]
        for i in range(q):
            if not np.array_equal(combined_prediction(single[i]), per_head_prediction(single[i, :, 0])):
                bad["h1"] += 1
    ok = not any(bad.values())
    report(capsys, 5, "prediction-rule invariants", ok, f"10000 cases, violations {bad}")
    assert ok


# -- 6. rademacher lab ------------------------------------------------------------------------------

def test_criterion_6_rademacher(capsys):
    started = time.perf_counter()
    fam = linear_toy_families()
    holds = 0
    worst_margin = math.inf
    for s in range(20):
        rng = np.random.default_rng([6, s])
        X = rng.normal(size=(10, 1))
        rep = check_theorem(X, fam["I"], fam["J"], fam["Z"], fam["P"], n_witness=0, rng=rng)
        holds += rep.holds
        worst_margin = min(worst_margin, rep.margin)
    const = estimate_complexity(constant_family(), np.zeros(1), n_sigma=100, rng=np.random.default_rng(6))
    rng = np.random.default_rng(66)
    witnesses = check_containment(fam["Z"], fam["P"], rng.normal(size=(10, 1)), 100, rng)
    elapsed = time.perf_counter() - started
    ok = holds == 20 and const.value == 1.0 and witnesses == 100 and elapsed < 120
    report(capsys, 6, "rademacher lab", ok,
           f"inequality {holds}/20 (min margin {worst_margin:.4f}), constant family {const.value!r}, "
           f"witnesses {witnesses}/100, {elapsed:.0f}s")
    assert holds == 20
    assert const.value == 1.0
    assert witnesses == 100
    assert elapsed < 120


# -- 7. evaluation statistics ---------------------------------------------------------------------

def test_criterion_7_evaluation_statistics(capsys):
    hw = ci_half_width(10.0, 600)
    hand = 1.96 * 10.0 / math.sqrt(600)
    set_numeric_mode("float32")
    ds = generate_synthetic(SyntheticSpec(n_classes=8, images_per_class=4, variation=0.15))
    model = build_model("conv4", ["prototype"], seed=0)
    rep = evaluate(model, ds, n_way=2, n_query=1)
    ok = (abs(hw - hand) <= 1e-12 and round(hw, 3) == 0.800 and rep.n_episodes == 600
          and len(rep.episode_accuracy) == 600 and load_config().episodes.eval_episodes == 600)
    report(capsys, 7, "evaluation statistics", ok,
           f"half-width {hw:.12f} vs {hand:.12f}; default run evaluated {len(rep.episode_accuracy)} episodes")
    assert abs(hw - hand) <= 1e-12
    assert round(hw, 3) == 0.800
    assert rep.n_episodes == 600 and len(rep.episode_accuracy) == 600


# -- 8. reproducibility ---------------------------------------------------------------------------

def test_criterion_8_reproducibility(capsys, tmp_path):
    from bsnet.runs import run_eval, run_train

    overrides = {"seed": 4, "numeric_mode": "float64", "episodes.n_way": 3, "episodes.n_query": 2,
                 "episodes.train_episodes": 4, "episodes.eval_episodes": 5, "episodes.eval_query": 2,
                 "train.checkpoint_every": 2, "data.synthetic.n_classes": 12,
                 "data.synthetic.images_per_class": 6}
    blobs = []
    for name in ("first", "second"):
        cfg = load_config(None, overrides)
        out = tmp_path / name
        run_train(cfg, out)
        run_eval(cfg, out / "checkpoint.bsn", out / "eval")
        blobs.append(((out / "checkpoint.bsn").read_bytes(), (out / "eval" / "eval_report.json").read_bytes()))
    ok = blobs[0] == blobs[1]
    report(capsys, 8, "reproducibility", ok,
           f"checkpoint {len(blobs[0][0])} bytes and report identical: {ok}")
    assert ok


# -- 9. weight sweep ------------------------------------------------------------------------------

def test_criterion_9_weight_sweep(capsys):
    set_numeric_mode("float32")
    train, _, test = synthetic_splits(images_per_class=10)
    cfg = TrainConfig(n_way=5, k_shot=1, n_query=2, episodes=10, seed=0, augment=Augment(enabled=False))
    rows = run_weight_sweep(train, test, cfg, eval_episodes=10, eval_query=2)
    table = format_table(rows)
    pairs = [(r.lam, r.beta) for r in rows]
    ok = pairs == list(WEIGHT_ROWS) and (1.0, 1.0) in pairs and all(np.isfinite(r.mean) for r in rows)
    with capsys.disabled():
        print("\n" + table)
    report(capsys, 9, "weight sweep", ok, f"{len(rows)} rows completed")
    assert ok
    assert len(table.splitlines()) == 2 + 11

"""End-to-end acceptance run. Each test prints one PASS/FAIL line; the summary repeats them.

The learning and attribution criteria train real models, so this module takes
several minutes on one core.
"""

import time

import numpy as np
import pytest

from acceptance_support import (
    histogram_mass,
    output_files,
    record,
    run_criterion4,
    shuffled_control,
    attribute_fold,
    timesep_pipeline,
    top3_hit_rate,
)
from pascseq import attribution as attr
from pascseq import autodiff as ad
from pascseq.autodiff import Tensor, grad_check
from pascseq.metrics import roc_auc, roc_curve, youden_threshold
from pascseq.nn import ARCHITECTURES, attention, conv_unit_forward, lstm_cell, lstm_stack
from pascseq.synth import bayes_auc
from pascseq.train import (
    AdadeltaState,
    TrainConfig,
    assign_folds,
    clip_gradients,
    fit,
    plateau_schedule,
    run_fold,
    split,
    train_step,
    write_epoch_log,
)
from test_autodiff import naive_conv1d
from test_metrics import pair_count_auc, random_instance, scan_youden
from test_nn import attn_params, conv_params, direction, scalar_cell, tiny_model
from test_train import tiny_data


@pytest.fixture(scope="module")
def cv_run(tmp_path_factory):
    return run_criterion4(tmp_path_factory.mktemp("c4"))


@pytest.fixture(scope="module")
def timesep_dirs(tmp_path_factory):
    return timesep_pipeline(tmp_path_factory.mktemp("c6a")), tmp_path_factory.mktemp("c6b")


def single_op_errors(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    m = Tensor(rng.normal(size=(4, 2)))
    seq = Tensor(rng.normal(size=(2, 3, 12)))
    k = Tensor(rng.normal(size=(4, 3, 3)))
    kb = Tensor(rng.normal(size=4))
    probe = Tensor(rng.normal(size=(2, 4, 12)))
    probe_pool = Tensor(rng.normal(size=(2, 3, 6)))
    probe_bn = Tensor(rng.normal(size=(2, 3, 12)))
    gamma, beta = Tensor(rng.uniform(0.5, 1.5, 3)), Tensor(rng.normal(size=3))
    labels = np.array([0, 1, 1])
    cases = {
        "matmul": (lambda t: ad.sum(ad.matmul(t, m)), x),
        "add": (lambda t: ad.sum(ad.mul(ad.add(t, w), w)), x),
        "mul": (lambda t: ad.sum(ad.mul(t, w)), x),
        "tanh": (lambda t: ad.sum(ad.mul(ad.tanh(t), w)), x),
        "sigmoid": (lambda t: ad.sum(ad.mul(ad.sigmoid(t), w)), x),
        "relu": (lambda t: ad.sum(ad.mul(ad.relu(t), w)), x),
        "softmax": (lambda t: ad.sum(ad.mul(ad.softmax(t, axis=1), w)), x),
        "cross_entropy": (lambda t: ad.cross_entropy(ad.matmul(t, m), labels), x),
        "conv1d input": (lambda t: ad.sum(ad.mul(ad.conv1d(t, k, kb, padding=1), probe)), seq),
        "conv1d kernel": (lambda t: ad.sum(ad.mul(ad.conv1d(seq, t, kb, padding=1), probe)), k),
        "maxpool1d": (lambda t: ad.sum(ad.mul(ad.maxpool1d(t, 2)[0], probe_pool)), seq),
        "batch_norm": (lambda t: ad.sum(ad.mul(ad.batch_norm(t, gamma, beta, 1e-5)[0], probe_bn)), seq),
    }
    return {name: grad_check(f, t) for name, (f, t) in cases.items()}


def layer_errors(rng):
    errs = {}
    d = direction(rng, 8, 4)
    xs, hs, cs = (Tensor(rng.normal(size=n)) for n in (8, 4, 4))
    wv = Tensor(rng.normal(size=4))

    def cell():
        h, c = lstm_cell(xs, hs, cs, d)
        return ad.sum(ad.mul(ad.add(h, c), wv))

    errs["lstm cell"] = max(grad_check(lambda _: cell(), t) for t in (xs, hs, cs, d.w_ih, d.w_hh, d.b))

    from pascseq.nn import LstmParams

    stack = LstmParams([(direction(rng, 8, 4), direction(rng, 8, 4)), (direction(rng, 8, 4), direction(rng, 8, 4))])
    seq = Tensor(rng.normal(size=(12, 8)))
    probe = Tensor(rng.normal(size=(12, 8)))
    params = [seq] + [t for layer in stack.layers for dd in layer for t in (dd.w_ih, dd.w_hh, dd.b)]
    errs["bilstm stack"] = max(grad_check(lambda _: ad.sum(ad.mul(lstm_stack(seq, stack)[0], probe)), t)
                               for t in params)

    p = attn_params(rng, 8, 5)
    hid = Tensor(rng.normal(size=(2, 12, 8)))
    wa = Tensor(rng.normal(size=(2, 8)))
    errs["attention"] = max(grad_check(lambda _: ad.sum(ad.mul(attention(hid, p)[0], wa)), t)
                            for t in (hid, p.w, p.b, p.v))

    for training in (False, True):
        cp = conv_params(rng, 8, 6)
        cp.running_var[:] = rng.uniform(0.5, 2, 6)
        x = Tensor(rng.normal(size=(3, 8, 12)))
        wc = Tensor(rng.normal(size=(3, 6, 12)))

        def conv_loss():
            return ad.sum(ad.mul(conv_unit_forward(x, cp, training), wc))

        checked = (x, cp.weight, cp.gamma, cp.beta) + (() if training else (cp.bias,))
        errs[f"conv unit {'train' if training else 'eval'}"] = max(grad_check(lambda _: conv_loss(), t)
                                                                   for t in checked)
        if training:
            with ad.Tape() as tape:
                out = conv_loss()
            # batch statistics cancel any per-channel shift: the exact gradient is zero
            errs["conv unit train bias (abs)"] = float(np.max(np.abs(ad.backward(tape, out)[cp.bias])))
    return errs


def test_criterion_1_gradients():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    ops = single_op_errors(rng)
    layers = layer_errors(rng)
    arch = {}
    ids = rng.integers(0, 10, size=(3, 12))
    labels = np.array([0, 1, 1])
    for name in ARCHITECTURES:
        model = tiny_model(name)
        arch[name] = max(grad_check(lambda _: ad.cross_entropy(model.forward(ids), labels), t)
                         for t in model.named_parameters().values())
    seconds = time.perf_counter() - start
    bias_abs = layers.pop("conv unit train bias (abs)")
    ok = (max(ops.values()) < 1e-6 and max(layers.values()) < 1e-4 and max(arch.values()) < 1e-4
          and bias_abs < 1e-12 and seconds < 60)
    detail = (f"ops max {max(ops.values()):.2e}, layers max {max(layers.values()):.2e}, "
              f"architectures max {max(arch.values()):.2e}, {seconds:.1f}s")
    assert record(1, "gradient correctness", ok, detail), (ops, layers, arch, bias_abs)


def test_criterion_2_oracles():
    rng = np.random.default_rng(7)
    conv_worst = 0.0
    for _ in range(1000):
        c_in, c_out, k = (int(v) for v in rng.integers(1, 5, size=3))
        pad = int(rng.integers(0, 3))
        length = int(rng.integers(max(1, k - 2 * pad), 10))
        x, w, b = rng.normal(size=(c_in, length)), rng.normal(size=(c_out, c_in, k)), rng.normal(size=c_out)
        conv_worst = max(conv_worst, float(np.max(np.abs(ad.conv1d(x, w, b, padding=pad).data
                                                         - naive_conv1d(x, w, b, pad)))))
    auc_worst, youden_exact = 0.0, True
    for _ in range(200):
        s, y = random_instance(rng)
        auc_worst = max(auc_worst, abs(roc_auc(s, y)[1] - pair_count_auc(s, y)))
        t, j = youden_threshold(roc_curve(s, y))
        bt, bj = scan_youden(s, y)
        youden_exact &= t == bt and abs(j - bj) <= 1e-15
    cell_worst = 0.0
    for _ in range(200):
        d_in, h_dim = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        d = direction(rng, d_in, h_dim, scale=1.0)
        x, h, c = rng.normal(size=d_in), rng.normal(size=h_dim), rng.normal(size=h_dim)
        h1, c1 = lstm_cell(Tensor(x), Tensor(h), Tensor(c), d)
        h2, c2 = scalar_cell(x.tolist(), h.tolist(), c.tolist(), d.w_ih.data.tolist(),
                             d.w_hh.data.tolist(), d.b.data.tolist())
        cell_worst = max(cell_worst, float(np.max(np.abs(h1.data - h2))), float(np.max(np.abs(c1.data - c2))))
    ok = conv_worst <= 1e-12 and auc_worst <= 1e-9 and youden_exact and cell_worst <= 1e-12
    detail = (f"conv1d {conv_worst:.1e}, auc {auc_worst:.1e}, youden exact {youden_exact}, "
              f"lstm cell {cell_worst:.1e}")
    assert record(2, "oracle equivalence", ok, detail)


def test_criterion_3_recipe(monkeypatch):
    import pascseq.train as train_mod

    checks = {}
    g = clip_gradients({"w": np.array([-1e9, -5.0000001, -5.0, 0.25, 5.0, 5.0000001, 1e9])})["w"]
    checks["clip"] = g.tolist() == [-5.0, -5.0, -5.0, 0.25, 5.0, 5.0, 5.0]

    flat = plateau_schedule([1.0] * 8, lr=0.01)
    decayed = plateau_schedule([1.0] * 9, lr=0.01)
    checks["plateau"] = flat == 0.01 and decayed == 0.01 * 0.8

    labels = (np.arange(1000) < 167).astype(np.int64)
    parts = split(labels, (0.75, 0.15, 0.10), seed=3)
    ok = sorted(np.concatenate(parts).tolist()) == list(range(1000))
    for part, r in zip(parts, (0.75, 0.15, 0.10)):
        ok &= abs(part.size - r * 1000) <= 1 and abs(labels[part].sum() - r * 167) <= 1
    checks["split"] = bool(ok)

    sizes = []
    real = train_mod.train_step

    def spy(model, ids, labels, *a, **k):
        sizes.append(len(ids))
        return real(model, ids, labels, *a, **k)

    monkeypatch.setattr(train_mod, "train_step", spy)
    emb, ids, labs = tiny_data(150)
    from pascseq.nn import Model, ModelSpec

    tiny = dict(embedding_dim=8, hidden=4, conv_channels=6, max_len=12)
    fit(Model.init(ModelSpec("bi-lstm-cnn", **tiny), emb), ids, labs, ids[:10], labs[:10], TrainConfig(max_epochs=1))
    checks["batch 64"] = sizes == [64, 64, 22]
    monkeypatch.undo()

    emb, ids, labs = tiny_data(64)
    model = Model.init(ModelSpec("bi-lstm-cnn", **tiny), emb)
    before = model.embeddings.tobytes()
    state, cfg = AdadeltaState(), TrainConfig(lr=1.0)
    rng = np.random.default_rng(0)
    for _ in range(100):
        idx = rng.choice(64, 16, replace=False)
        train_step(model, ids[idx], labs[idx], state, cfg.lr, cfg)
    checks["frozen embeddings"] = model.embeddings.tobytes() == before

    assert record(3, "recipe fidelity", all(checks.values()), ", ".join(f"{k} {v}" for k, v in checks.items()))


def test_criterion_4_learning(cv_run):
    bayes = bayes_auc(0.9, 8)
    mean = cv_run.cv.mean_auc
    ok = 0.90 <= mean <= bayes + 0.02 and cv_run.seconds < 15 * 60
    detail = (f"fold AUCs {[round(a, 4) for a in cv_run.cv.aucs]}, mean {mean:.4f}, Bayes {bayes:.4f}, "
              f"{cv_run.seconds:.0f}s")
    assert record(4, "learning capability", ok, detail)


def test_criterion_5_attribution_sanity(cv_run):
    trained, _ = attribute_fold(cv_run.cv, cv_run.cv.best_fold, cv_run.cohort)
    control, _ = shuffled_control(cv_run)
    rate = top3_hit_rate(trained, cv_run.cohort, cv_run.manifest)
    control_rate = top3_hit_rate(control, cv_run.cohort, cv_run.manifest)
    ok = rate >= 0.60 and control_rate < 0.15
    detail = (f"trained {rate:.3f} over {len(trained)} patients (floor 0.60), "
              f"shuffled control {control_rate:.3f} over {len(control)} (ceiling 0.15)")
    assert record(5, "attribution sanity", ok, detail)


def test_criterion_6_time_separation(timesep_dirs):
    first, _ = timesep_dirs
    mass = histogram_mass(first / "hist")
    neg = sum(n for n, _ in mass.values())
    total = sum(t for _, t in mass.values())
    share = neg / total if total else 0.0
    worst = min(mass, key=lambda c: mass[c][0] / mass[c][1])
    detail = (f"{share:.3f} of {total} attributions at negative days over {len(mass)} histograms "
              f"(floor 0.90); lowest {worst} {mass[worst][0]}/{mass[worst][1]}")
    assert record(6, "time-separation report", total > 0 and share >= 0.90, detail)


def test_criterion_7_reference_note(timesep_dirs, cv_run):
    import json

    first, _ = timesep_dirs
    ref = json.loads((first / "metrics.json").read_text())["reference"]
    cv_ref = cv_run.cv.to_json()["reference"]
    ok = (ref["reproducible"] is False and cv_ref["reproducible"] is False
          and ref["published_accuracy"] == 0.7048 and cv_ref["published_mean_auc"] == "0.75 ± 0.01"
          and "restricted" in ref["note"].lower())
    assert record(7, "reference numbers flagged non-reproducible", ok, ref["note"])


def test_criterion_8_determinism(cv_run, timesep_dirs, tmp_path):
    c = cv_run
    best = c.cv.best_fold
    assignment = assign_folds(c.cohort.labels, c.config.folds, c.config.seed)
    again = run_fold(best.fold, c.cohort.token_ids, c.cohort.labels, c.cohort.embeddings, assignment, c.spec, c.config)
    write_epoch_log(best.log, tmp_path / "a.csv")
    write_epoch_log(again.log, tmp_path / "b.csv")
    same = {
        "fold log": (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes(),
        "fold scores": best.scores.tobytes() == again.scores.tobytes(),
        "fold state": all(best.state[k].tobytes() == again.state[k].tobytes() for k in best.state),
        "fold metrics": (best.auc, best.threshold, best.accuracy) == (again.auc, again.threshold, again.accuracy),
    }
    from dataclasses import replace

    rerun_cv = replace(c.cv, folds=[again if f.fold == best.fold else f for f in c.cv.folds])
    attr.write_attributions(attribute_fold(c.cv, best, c.cohort)[0], tmp_path / "a.jsonl")
    attr.write_attributions(attribute_fold(rerun_cv, again, c.cohort)[0], tmp_path / "b.jsonl")
    same["fold attributions"] = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    first, second = timesep_dirs
    timesep_pipeline(second)
    a, b = output_files(first), output_files(second)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    same["cli pipeline files"] = not differing
    detail = ", ".join(f"{k} {v}" for k, v in same.items()) + f"; {len(a)} CLI files compared"
    assert record(8, "determinism", all(same.values()), detail), differing

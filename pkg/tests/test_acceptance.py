"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that the conftest hook prints in the
terminal summary.  Criteria 6-9 train real models at desk scale and take
several minutes in total; the trained runs are shared through module
fixtures.
"""

from decimal import Decimal, getcontext

import numpy as np
import pytest

from _oracles import centralized_train, lenet_lite, max_rel_diff, smooth_point, variance_interval
from sldp import cli
from sldp import experiments as ex
from sldp import protocol as P
from sldp.data import load_mnist
from sldp.dp import PrivacyBudget, add_gaussian, calibrate_sigma, compose_review_sigma
from sldp.metrics import distance_correlation, mse, ssim
from sldp.nn import ConvTranspose2D, Conv2D, Dense, Flatten, MaxPool2D, ReLU, Sequential, grad_check
from sldp.optim import cosine_lr
from sldp.seeding import stream
from sldp.zoo import SplitModelSpec, build_lenet5

pytestmark = pytest.mark.acceptance

RESULTS = {}
SEEDS = (0, 1, 2)


def record(n, name, ok, detail):
    RESULTS[n] = (bool(ok), name, detail)
    assert ok, f"criterion {n} ({name}) failed: {detail}"


def test_01_gradient_correctness():
    cases = {
        "Dense": (Sequential([Dense(5, 4)], (5,)), (3, 5)),
        "ReLU": (Sequential([Dense(5, 4), ReLU()], (5,)), (3, 5)),
        "Flatten": (Sequential([Flatten(), Dense(12, 3)], (3, 2, 2)), (2, 3, 2, 2)),
        "Conv2D": (Sequential([Conv2D(2, 3, 3, stride=2, padding=1)], (2, 5, 5)), (2, 2, 5, 5)),
        "MaxPool2D": (Sequential([MaxPool2D(2)], (2, 4, 4)), (2, 2, 4, 4)),
        "ConvTranspose2D": (Sequential([ConvTranspose2D(2, 3, 4, 2, 1)], (2, 3, 3)), (2, 2, 3, 3)),
    }
    errors = {}
    for name, (model, shape) in cases.items():
        model.init(np.random.default_rng(11))
        errors[name] = grad_check(model, np.random.default_rng(12).standard_normal(shape), step=1e-3)
    seed, lite, x = smooth_point(lenet_lite, (2, 1, 28, 28), 1e-3)
    errors["LeNet-5-lite"] = grad_check(lite, x, step=1e-3)
    worst = max(errors.values())
    record(1, "gradient correctness", worst < 1e-4,
           f"max rel err {worst:.2e} over {len(errors)} graphs (lite LeNet at kink-free seed {seed})")


def test_02_dp_calibration():
    getcontext().prec = 40
    oracle = float((2 * (Decimal("1.25") / Decimal("1e-5")).ln()).sqrt() / 2)
    sigma = calibrate_sigma(PrivacyBudget(2.0, 1e-5, 1.0))
    n = 10 ** 6
    draws = add_gaussian(np.zeros(n), sigma, stream(0, "acceptance-calibration"))
    lo, hi = variance_interval(sigma ** 2, n)
    var = draws.var(ddof=1)
    record(2, "DP calibration", abs(sigma - oracle) <= 1e-5 and lo <= var <= hi,
           f"sigma {sigma:.7f} vs decimal oracle {oracle:.7f}; var {var:.4f} in [{lo:.4f}, {hi:.4f}]")


def test_03_noise_composition():
    n = 10 ** 6
    rng = stream(0, "acceptance-composition")
    x = np.zeros(n)
    y = add_gaussian(add_gaussian(x, 1.0, rng), compose_review_sigma(1.0, 2.0), rng)
    lo, hi = variance_interval(4.0, n)
    var = (y - x).var(ddof=1)
    record(3, "noise composition", lo <= var <= hi, f"var {var:.4f} in [{lo:.4f}, {hi:.4f}]")


def test_04_review_neutrality():
    layers = [Dense(6, 5, name="S1"), ReLU(name="SR"), Dense(5, 4, name="S2")]
    head = [Dense(8, 6, name="C1")]
    g = Sequential(head + layers, (8,)).init(np.random.default_rng(3))
    server = P.make_server(SplitModelSpec(g, 1, None, "toy"))
    rng = np.random.default_rng(4)
    msg = P.SmashedMsg.of(rng.standard_normal((16, 6)), rng.integers(0, 4, 16))
    _, plain_feat, plain_w = P.server_gradients(server, msg.features, msg.labels)
    feats, labels = P.server_prepare_data(msg, 0.0, rng)
    _, full, dup_w = P.server_gradients(server, feats, labels)
    a = max_rel_diff(full[:16], full[16:])
    b = max_rel_diff(P.slice_split_gradients(full, msg).grad, 0.5 * plain_feat)
    c = max(max_rel_diff(u, v) for u, v in zip(dup_w, plain_w))
    record(4, "review neutrality", a <= 1e-12 and b <= 1e-10 and c <= 1e-12,
           f"halves {a:.1e}, slice vs half plain {b:.1e}, weight grads {c:.1e}")


def test_05_split_transparency():
    train, _ = load_mnist(train_size=256, test_size=64, seed=0)
    spec = build_lenet5("split1", seed=5, noise_point=None)
    c = P.make_client(0, spec, None, train.images, train.labels, np.random.default_rng(1), np.random.default_rng(99))
    server = P.make_server(spec)
    for e in range(3):
        P.run_global_epoch([c], server, np.random.default_rng(e), cosine_lr(e, 3, 3e-3), batch_size=64)
    ref = centralized_train(spec.graph.copy(), train.images, train.labels, 3, 3e-3, np.random.default_rng(99), 64)
    diff = max(max_rel_diff(a, b) for a, b in zip(c.head.parameters() + server.model.parameters(),
                                                   ref.parameters()))
    record(5, "split transparency", diff <= 1e-12, f"max relative parameter difference {diff:.1e}")


@pytest.fixture(scope="module")
def heterogeneity_runs():
    """Benchmark (all five at eps=2), conventional (one at eps=2), and review runs per seed."""
    base = ex.make_config()
    cfgs = {
        "bench": ex.make_config({"epsilons": [2.0] * 5}),
        "conv": base,
        "review": ex.make_config({"review": {"enabled": True}}),
    }
    return {k: {s: ex.run_one(c, s) for s in SEEDS} for k, c in cfgs.items()}


def _dp_acc(runs, kind):
    return float(np.mean([runs[kind][s].client(0).accuracy for s in SEEDS]))


def _bench_acc(runs):
    return float(np.mean([np.mean([c.accuracy for c in runs["bench"][s].clients]) for s in SEEDS]))


def _clean_acc(runs, kind):
    return float(np.mean([np.mean([c.accuracy for c in runs[kind][s].clients if c.epsilon is None]) for s in SEEDS]))


def test_06_forgetting_trend(heterogeneity_runs):
    bench, conv = _bench_acc(heterogeneity_runs), _dp_acc(heterogeneity_runs, "conv")
    record(6, "forgetting trend", conv <= bench - 0.03,
           f"eps=2 client {conv:.4f} vs uniform benchmark {bench:.4f} (gap {100 * (bench - conv):.2f} pts, need >= 3)")


def test_07_review_improvement(heterogeneity_runs):
    runs = heterogeneity_runs
    bench, conv, rev = _bench_acc(runs), _dp_acc(runs, "conv"), _dp_acc(runs, "review")
    recovered = (rev - conv) / (bench - conv) if bench > conv else float("nan")
    drop = _clean_acc(runs, "conv") - _clean_acc(runs, "review")
    record(7, "review improvement", recovered >= 0.5 and drop <= 0.01,
           f"recovered {100 * recovered:.0f}% of gap (need >= 50%); clean clients "
           f"{_clean_acc(runs, 'conv'):.4f} -> {_clean_acc(runs, 'review'):.4f}, "
           f"drop {100 * drop:.2f} pts (need <= 1)")


@pytest.fixture(scope="module")
def sweep_rows():
    """Single-client runs with attacks: split1 at Input and MaxP(1) (eps=2 and noiseless), split2 at MaxP(2)."""
    c1 = ex.make_config()
    c2 = ex.make_config({"arch": "lenet5-split2"})
    rows = ex.run_tradeoff_sweep(c1, [2.0], ["Input", "MaxP(1)"])
    rows += ex.run_tradeoff_sweep(c1, [None], ["MaxP(1)"])
    rows += ex.run_tradeoff_sweep(c2, [2.0], ["MaxP(2)"])
    return rows


def _mean(rows, key, **match):
    sel = [r[key] for r in rows if all(r[k] == v for k, v in match.items())]
    assert len(sel) == len(SEEDS)
    return float(np.mean(sel))


def test_08_layerwise_tradeoff(sweep_rows):
    acc_in = _mean(sweep_rows, "accuracy", arch="lenet5-split1", injection_point="Input", epsilon=2.0)
    acc_mp = _mean(sweep_rows, "accuracy", arch="lenet5-split1", injection_point="MaxP(1)", epsilon=2.0)
    s1 = _mean(sweep_rows, "ssim", arch="lenet5-split1", injection_point="MaxP(1)", epsilon=2.0)
    s2 = _mean(sweep_rows, "ssim", arch="lenet5-split2", injection_point="MaxP(2)", epsilon=2.0)
    record(8, "layerwise trade-off", acc_in < acc_mp and s2 < s1,
           f"accuracy Input {acc_in:.4f} < MaxP(1) {acc_mp:.4f}; SSIM split2 {s2:.4f} < split1 {s1:.4f}")


def test_09_attack_sanity(sweep_rows):
    clean = _mean(sweep_rows, "ssim", arch="lenet5-split1", injection_point="MaxP(1)", epsilon=None)
    noisy = _mean(sweep_rows, "ssim", arch="lenet5-split1", injection_point="MaxP(1)", epsilon=2.0)
    record(9, "attack sanity", clean - noisy >= 0.2,
           f"SSIM noiseless {clean:.4f} vs eps=2 {noisy:.4f} (margin {clean - noisy:.4f}, need >= 0.2)")


def test_10_metric_identities():
    rng = np.random.default_rng(0)
    x = rng.random((28, 28))
    a = rng.standard_normal((200, 5))
    dcors = [distance_correlation(np.random.default_rng(s).standard_normal((2000, 1)),
                                  np.random.default_rng(s + 100).standard_normal((2000, 1))) for s in SEEDS]
    ok = ssim(x, x) == 1.0 and mse(x, x) == 0.0 and abs(distance_correlation(a, 2 * a) - 1) <= 1e-9
    record(10, "metric identities", ok and max(dcors) < 0.1,
           f"ssim(x,x)={ssim(x, x)}, mse(x,x)={mse(x, x)}, dcor(A,2A)-1={distance_correlation(a, 2 * a) - 1:.1e}, "
           f"independent dcor max {max(dcors):.4f}")


def test_11_communication_audit():
    rows = {(r["arch"], r["upsampled"]): r for r in ex.run_comm_audit(ex.make_config())}
    ups = all(rows[(a, True)]["ratio"] == 1.0 == rows[(a, True)]["measured_ratio"]
              for a in ("lenet5-split1", "lenet5-split2", "vgg11-lite"))
    base = all(r["measured_ratio"] == r["smashed_elements"] / r["input_elements"] == r["ratio"]
               for (a, u), r in rows.items() if not u)
    lenet = rows[("lenet5-split1", False)]["ratio"] == 864 / 784
    vgg = rows[("vgg11-lite", False)]
    quoted = vgg["quoted_ratio"] == 5.3
    record(11, "communication audit", ups and base and lenet and quoted,
           f"upsampled ratios 1.0: {ups}; baselines exact: {base}; LeNet split1 {864 / 784:.4f}; "
           f"vgg measured {vgg['ratio']:.4f} (quoted {vgg['quoted_smashed_shape']}, {vgg['quoted_ratio']}x)")


def test_12_determinism(tmp_path):
    import json
    cfg = {"dataset": {"train_size": 600, "test_size": 200}, "clients": 2, "epsilons": [2.0, None], "epochs": 2,
           "review": {"enabled": True}, "attack": {"enabled": True, "queries": 100, "eval": 50, "epochs": 2}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["train", "--config", str(path), "--seed", "0", "--out", str(out)]) == 0
        assert cli.main(["audit", "--config", str(path), "--out", str(out)]) == 0
        outs.append((out / "train.csv").read_bytes() + (out / "audit.csv").read_bytes())
    record(12, "determinism", outs[0] == outs[1], f"two CLI runs, {len(outs[0])} CSV bytes, identical={outs[0] == outs[1]}")

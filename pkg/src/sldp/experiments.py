"""Config-driven experiments: multi-client training, trade-off sweeps, attacks,
communication audits, and deterministic CSV/JSON reports."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from . import data as data_mod
from .attack import export_reconstructions, run_attack
from .dp import PrivacyBudget
from .metrics import accuracy
from .optim import cosine_lr
from .protocol import (LABEL_BYTES, VALUE_BYTES, ClientState, ReviewPolicy, ServerState, client_forward,
                       make_client, make_server, predict, run_global_epoch)
from .seeding import stream
from .zoo import INPUT, PRESETS, SplitModelSpec, build_preset

DEFAULT_CONFIG: dict = {
    "arch": "lenet5-split1",
    "upsampled": False,
    "width_scale": 0.25,
    "dataset": {
        "name": "mnist",
        "path": None,
        "train_size": 4000,
        "test_size": 1000,
        "per_class": 120,
        "partition": "iid",
        "major": 0.6,
    },
    "clients": 5,
    "epsilons": [2.0, None, None, None, None],
    "delta": 1e-5,
    "sensitivity": 1.0,
    "injection_point": "split",
    "review": {"enabled": False, "target": "max"},
    "epochs": 15,
    "batch_size": 64,
    "lr": 3e-3,
    "seeds": [0, 1, 2],
    "out": "runs",
    "attack": {"enabled": False, "victim": 0, "queries": 800, "eval": 200, "epochs": 30, "lr": 1e-3,
               "export": 0},
    "sweep": {"epsilons": [1.0, 2.0, 4.0, 8.0], "points": [INPUT, "Conv(1)", "ReLU(1)", "MaxP(1)"]},
    "audit": {"archs": list(PRESETS)},
}

FULL_SCALE_OVERRIDES = {"epochs": 100, "dataset": {"train_size": None, "test_size": None}}

_num_or_null = {"type": ["number", "null"]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "arch": {"enum": list(PRESETS)},
        "upsampled": {"type": "boolean"},
        "width_scale": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"enum": ["mnist", "synthetic", "cifar10"]},
                "path": {"type": ["string", "null"]},
                "train_size": {"type": ["integer", "null"], "minimum": 1},
                "test_size": {"type": ["integer", "null"], "minimum": 1},
                "per_class": {"type": "integer", "minimum": 1},
                "partition": {"enum": ["iid", "noniid"]},
                "major": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "clients": {"type": "integer", "minimum": 1},
        "epsilons": {"type": "array", "items": {"type": ["number", "null"], "exclusiveMinimum": 0}},
        "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "sensitivity": {"type": "number", "exclusiveMinimum": 0},
        "injection_point": {"type": ["string", "null"]},
        "review": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "target": {"anyOf": [{"const": "max"}, {"type": "number", "minimum": 0}]},
            },
        },
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "out": {"type": "string"},
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "victim": {"type": "integer", "minimum": 0},
                "queries": {"type": "integer", "minimum": 1},
                "eval": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "export": {"type": "integer", "minimum": 0},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epsilons": {"type": "array", "items": _num_or_null, "minItems": 1},
                "points": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            },
        },
        "audit": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"archs": {"type": "array", "items": {"enum": list(PRESETS)}, "minItems": 1}},
        },
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def make_config(overrides: dict | None = None, full_scale: bool = False) -> dict:
    """Validate ``overrides`` against the schema and fill in defaults."""
    overrides = overrides or {}
    try:
        jsonschema.validate(overrides, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config at {'/'.join(map(str, exc.absolute_path)) or '<root>'}: "
                          f"{exc.message}") from exc
    cfg = _merge(DEFAULT_CONFIG, FULL_SCALE_OVERRIDES) if full_scale else copy.deepcopy(DEFAULT_CONFIG)
    if "clients" in overrides and "epsilons" not in overrides:
        cfg["epsilons"] = [None] * overrides["clients"]
    cfg = _merge(cfg, overrides)
    if len(cfg["epsilons"]) != cfg["clients"]:
        raise ConfigError(f"epsilons lists {len(cfg['epsilons'])} clients, config has {cfg['clients']}")
    if cfg["attack"]["victim"] >= cfg["clients"]:
        raise ConfigError("attack victim index out of range")
    try:
        build_spec(cfg, 0)  # checks injection point names
        for point in cfg["sweep"]["points"]:
            build_spec(cfg, 0, point)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path, full_scale: bool = False) -> dict:
    with open(path) as f:
        return make_config(json.load(f), full_scale)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def build_spec(cfg: dict, seed: int, injection_point: str | None | object = ...) -> SplitModelSpec:
    point = cfg["injection_point"] if injection_point is ... else injection_point
    input_shape = (1, 28, 28) if cfg["arch"] == "vgg11-lite" and cfg["dataset"]["name"] == "mnist" else None
    return build_preset(cfg["arch"], cfg["upsampled"], cfg["width_scale"], seed, point, input_shape)


def load_data(cfg: dict, seed: int) -> tuple[data_mod.Dataset, data_mod.Dataset]:
    ds = cfg["dataset"]
    data_seed = int(stream(seed, "data").integers(2 ** 31))
    if ds["name"] == "mnist":
        return data_mod.load_mnist(ds["path"], ds["train_size"], ds["test_size"], data_seed)
    shape = (1, 28, 28) if cfg["arch"].startswith("lenet") else (3, 32, 32)
    if ds["name"] == "cifar10" and ds["path"]:
        base = Path(ds["path"])
        parts = [data_mod.load_cifar_batch(p) for p in sorted(base.glob("data_batch_*.bin"))]
        full = data_mod.Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
        test = data_mod.load_cifar_batch(base / "test_batch.bin", "test")
        train, = data_mod.stratified_split(full, (ds["train_size"] or len(full),), data_seed)
        test, = data_mod.stratified_split(test, (ds["test_size"] or len(test),), data_seed + 1)
        return train, data_mod.Dataset(test.images, test.labels, "test")
    # synthetic stand-in; one draw, split into train/test
    full = data_mod.synthesize(10, ds["per_class"], shape, seed=data_seed)
    n_train = ds["train_size"] or int(0.8 * len(full))
    n_test = ds["test_size"] or len(full) - n_train
    n_train = min(n_train, len(full) - n_test)
    train, test = data_mod.stratified_split(full, (n_train, n_test), data_seed)
    return train, data_mod.Dataset(test.images, test.labels, "test")


def shard_indices(cfg: dict, train: data_mod.Dataset, seed: int) -> list[np.ndarray]:
    part_seed = int(stream(seed, "partition").integers(2 ** 31))
    plan = data_mod.PartitionPlan(cfg["dataset"]["partition"], cfg["clients"], part_seed, cfg["dataset"]["major"])
    return plan.apply(train)


def budget_for(cfg: dict, eps) -> PrivacyBudget | None:
    return None if eps is None else PrivacyBudget(float(eps), cfg["delta"], cfg["sensitivity"])


@dataclass
class ClientResult:
    client_id: int
    epsilon: float | None
    sigma: float
    accuracy: float | None
    bytes_up: int
    bytes_down: int
    ssim: float | None = None
    dissimilarity: float | None = None
    mse: float | None = None
    psnr: float | None = None


@dataclass
class RunReport:
    seed: int
    arch: str
    injection_point: str | None
    review: bool
    clients: list[ClientResult]
    losses: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    wall_time: float = 0.0
    grad_scale: float = 1.0

    def client(self, cid: int) -> ClientResult:
        return next(c for c in self.clients if c.client_id == cid)


@dataclass
class TrainedRun:
    spec: SplitModelSpec
    clients: list[ClientState]
    server: ServerState
    train: data_mod.Dataset
    test: data_mod.Dataset
    epoch_reports: list


def train_run(cfg: dict, seed: int) -> TrainedRun:
    """Build clients and server for one seed and train for ``cfg['epochs']`` global epochs."""
    train, test = load_data(cfg, seed)
    spec = build_spec(cfg, seed)
    shards = shard_indices(cfg, train, seed)
    clients = [
        make_client(i, spec, budget_for(cfg, eps), train.images[idx], train.labels[idx],
                    stream(seed, "noise", i), stream(seed, "batches", i))
        for i, (eps, idx) in enumerate(zip(cfg["epsilons"], shards))
    ]
    review = ReviewPolicy(cfg["review"]["enabled"], cfg["review"]["target"])
    server = make_server(spec, review, stream(seed, "review"))
    schedule_rng = stream(seed, "schedule")
    reports = []
    for epoch in range(cfg["epochs"]):
        lr = cosine_lr(epoch, cfg["epochs"], cfg["lr"])
        reports.append(run_global_epoch(clients, server, schedule_rng, lr, cfg["batch_size"]))
    return TrainedRun(spec, clients, server, train, test, reports)


def evaluate(run: TrainedRun, seed: int) -> dict[int, float]:
    """Test accuracy of each client's own head (with its own noise) composed with the server."""
    out = {}
    for c in run.clients:
        preds = predict(c.head, run.server.model, run.test.images, c.sigma, stream(seed, "eval", c.id))
        out[c.id] = accuracy(preds, run.test.labels)
    return out


def attack_run(cfg: dict, run: TrainedRun, seed: int, out_dir: Path | None = None) -> dict:
    """Black-box inversion of the configured victim client's head on held-out test images."""
    a = cfg["attack"]
    victim = run.clients[a["victim"]]
    oracle_rng = stream(seed, "attack-oracle")

    def oracle(x):
        return victim.head.forward(x, victim.sigma, oracle_rng)[0]

    n_query = min(a["queries"], len(run.test) - 1)
    n_eval = min(a["eval"], len(run.test) - n_query)
    perm = stream(seed, "attack-split").permutation(len(run.test))
    query = run.test.images[perm[:n_query]]
    held = run.test.images[perm[n_query:n_query + n_eval]]
    rep = run_attack(oracle, query, held, client_layers=run.spec.client_layers, epochs=a["epochs"], lr=a["lr"],
                     seed=int(stream(seed, "attack-init").integers(2 ** 31)))
    if out_dir is not None and a.get("export"):
        export_reconstructions(Path(out_dir) / f"recon_seed{seed}", held, rep.reconstructions, a["export"])
    return rep.summary()


def run_one(cfg: dict, seed: int, out_dir: Path | None = None, keep: bool = False):
    t0 = time.perf_counter()
    run = train_run(cfg, seed)
    accs = evaluate(run, seed)
    leak = attack_run(cfg, run, seed, out_dir) if cfg["attack"]["enabled"] else None
    last = run.epoch_reports[-1]
    results = []
    for c, eps in zip(run.clients, cfg["epsilons"]):
        r = ClientResult(c.id, eps, c.sigma, accs[c.id], last.bytes_up[c.id], last.bytes_down[c.id])
        if leak is not None and c.id == cfg["attack"]["victim"]:
            r.ssim, r.dissimilarity, r.mse, r.psnr = leak["ssim"], leak["dissimilarity"], leak["mse"], leak["psnr"]
        results.append(r)
    report = RunReport(seed, run.spec.arch_name, run.spec.noise_point, cfg["review"]["enabled"], results,
                       [dict(er.loss) for er in run.epoch_reports], cfg, config_hash(cfg),
                       time.perf_counter() - t0, 0.5 if cfg["review"]["enabled"] else 1.0)
    return (report, run) if keep else report


def run_multiclient(cfg: dict, out_dir: Path | None = None) -> list[RunReport]:
    return [run_one(cfg, seed, out_dir) for seed in cfg["seeds"]]


SWEEP_COLUMNS = ["seed", "arch", "injection_point", "epsilon", "sigma", "accuracy", "ssim", "dissimilarity"]


def run_tradeoff_sweep(cfg: dict, epsilons: Sequence | None = None, points: Sequence[str] | None = None,
                       out_dir: Path | None = None) -> list[dict]:
    """Single-client training plus inversion attack for every (injection point, epsilon, seed)."""
    epsilons = list(epsilons if epsilons is not None else cfg["sweep"]["epsilons"])
    points = list(points if points is not None else cfg["sweep"]["points"])
    if not epsilons or not points:
        raise ConfigError("sweep grids must be nonempty")
    rows = []
    for point in points:
        for eps in epsilons:
            cell = _merge(cfg, {"clients": 1, "epsilons": [eps], "injection_point": point,
                                "review": {"enabled": False}, "attack": {"enabled": True, "victim": 0}})
            for seed in cfg["seeds"]:
                rep = run_one(cell, seed, out_dir)
                c = rep.clients[0]
                rows.append({"seed": seed, "arch": rep.arch, "injection_point": point, "epsilon": eps,
                             "sigma": c.sigma, "accuracy": c.accuracy, "ssim": c.ssim,
                             "dissimilarity": c.dissimilarity})
    return rows


AUDIT_COLUMNS = ["arch", "upsampled", "input_shape", "smashed_shape", "input_elements", "smashed_elements",
                 "ratio", "measured_ratio", "bytes_per_batch", "batches_per_epoch", "bytes_per_epoch",
                 "bytes_total", "quoted_smashed_shape", "quoted_ratio"]

# Published figures for the full-size VGG-11 head (smashed shape, saving factor);
# reported next to the measured values, never asserted.
QUOTED = {"vgg11-lite": ("32x16x32", 5.3)}


def run_comm_audit(cfg: dict) -> list[dict]:
    """Smashed-versus-input payload sizes for each preset, with and without the upsampled head.

    ``measured_ratio`` comes from an actual client forward pass; ``ratio`` from
    shape arithmetic.  Only the split layer is audited (width_scale 1 for VGG).
    """
    rows = []
    bs = cfg["batch_size"]
    n = cfg["dataset"]["train_size"] or 60000
    batches = math.ceil(n / bs)
    for arch in cfg["audit"]["archs"]:
        for upsampled in (False, True):
            spec = build_preset(arch, upsampled, 1.0, 0, "split")
            inp = int(np.prod(spec.input_shape))
            sm = int(np.prod(spec.smashed_shape))
            client = make_client(0, spec, None, np.zeros((bs, *spec.input_shape)), np.zeros(bs, dtype=np.int64),
                                 np.random.default_rng(0), np.random.default_rng(0))
            msg = client_forward(client, client.images, client.labels)
            measured = (msg.byte_count - LABEL_BYTES * bs) / (VALUE_BYTES * bs * inp)
            per_batch = msg.byte_count
            quoted = QUOTED.get(arch) if not upsampled else None
            rows.append({
                "arch": arch, "upsampled": upsampled,
                "input_shape": "x".join(map(str, spec.input_shape)),
                "smashed_shape": "x".join(map(str, spec.smashed_shape)),
                "input_elements": inp, "smashed_elements": sm, "ratio": sm / inp, "measured_ratio": measured,
                "bytes_per_batch": per_batch, "batches_per_epoch": batches,
                "bytes_per_epoch": per_batch * batches, "bytes_total": per_batch * batches * cfg["epochs"],
                "quoted_smashed_shape": quoted[0] if quoted else None,
                "quoted_ratio": quoted[1] if quoted else None,
            })
    return rows


REPORT_COLUMNS = ["seed", "arch", "client_id", "epsilon", "sigma", "injection_point", "review", "accuracy",
                  "ssim", "dissimilarity", "bytes_up", "bytes_down"]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


def rows_from_reports(reports: Sequence[RunReport]) -> list[dict]:
    rows = []
    for rep in reports:
        for c in rep.clients:
            rows.append({"seed": rep.seed, "arch": rep.arch, "client_id": c.client_id, "epsilon": c.epsilon,
                         "sigma": c.sigma, "injection_point": rep.injection_point, "review": rep.review,
                         "accuracy": c.accuracy, "ssim": c.ssim, "dissimilarity": c.dissimilarity,
                         "bytes_up": c.bytes_up, "bytes_down": c.bytes_down})
    return rows


def to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(col)) for col in columns])
    return buf.getvalue()


def report(reports: Sequence[RunReport], out_dir, name: str = "results") -> tuple[Path, Path]:
    """Write ``<name>.csv`` (fixed columns) and ``<name>.json`` (rows plus config)."""
    if not reports:
        raise ValueError("nothing to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{name}.csv", out_dir / f"{name}.json"
    csv_path.write_text(to_csv(rows_from_reports(reports), REPORT_COLUMNS))
    payload = {"runs": [asdict(r) for r in reports]}
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default))
    return csv_path, json_path


def write_rows(rows: Sequence[dict], columns: Sequence[str], out_dir, name: str, meta: dict | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{name}.csv", out_dir / f"{name}.json"
    csv_path.write_text(to_csv(rows, columns))
    json_path.write_text(json.dumps({"rows": list(rows), **(meta or {})}, indent=2, sort_keys=True,
                                    default=_json_default))
    return csv_path, json_path


def merge_csv(paths: Sequence, out_path) -> Path:
    """Concatenate CSV files with identical headers, rows in input order."""
    header, body = None, []
    for p in paths:
        lines = Path(p).read_text().splitlines()
        if not lines:
            continue
        if header is None:
            header = lines[0]
        elif lines[0] != header:
            raise ValueError(f"{p}: header differs from the first file")
        body.extend(lines[1:])
    if header is None:
        raise ValueError("no rows to merge")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join([header, *body]) + "\n")
    return out_path


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def save_checkpoint(path, tensors: Sequence[tuple[str, np.ndarray]], meta: dict | None = None) -> Path:
    """JSON header line describing the tensors, then their values as little-endian float64."""
    header = {"format": "sldp-checkpoint", "version": 1, "meta": meta or {},
              "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors]}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, default=_json_default).encode() + b"\n")
        for _, a in tensors:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    if header.get("format") != "sldp-checkpoint":
        raise ValueError(f"{path}: not a checkpoint file")
    body = np.frombuffer(raw[nl + 1:], dtype="<f8")
    out, pos = [], 0
    for t in header["tensors"]:
        size = int(np.prod(t["shape"]))
        if pos + size > body.size:
            raise ValueError(f"{path}: truncated at tensor {t['name']}")
        out.append((t["name"], body[pos:pos + size].reshape(t["shape"]).astype(np.float64)))
        pos += size
    if pos != body.size:
        raise ValueError(f"{path}: {body.size - pos} trailing values")
    return header, out


def checkpoint_run(run: TrainedRun, cfg: dict, seed: int, path) -> Path:
    tensors = []
    for c in run.clients:
        tensors += [(f"client{c.id}.{i}", p) for i, p in enumerate(c.head.parameters())]
    tensors += [(f"server.{i}", p) for i, p in enumerate(run.server.model.parameters())]
    return save_checkpoint(path, tensors, {"config": cfg, "seed": seed})


def restore_run(path) -> tuple[dict, int, TrainedRun]:
    """Rebuild a trained run (client heads, server) from a checkpoint without retraining."""
    header, tensors = load_checkpoint(path)
    cfg, seed = header["meta"]["config"], header["meta"]["seed"]
    train, test = load_data(cfg, seed)
    spec = build_spec(cfg, seed)
    clients = [make_client(i, spec, budget_for(cfg, eps), train.images[:0], train.labels[:0],
                           stream(seed, "noise", i), stream(seed, "batches", i))
               for i, eps in enumerate(cfg["epsilons"])]
    server = make_server(spec, ReviewPolicy(cfg["review"]["enabled"], cfg["review"]["target"]))
    by_prefix: dict[str, list[np.ndarray]] = {}
    for name, arr in tensors:
        by_prefix.setdefault(name.split(".")[0], []).append(arr)
    for c in clients:
        c.head.set_parameters(by_prefix[f"client{c.id}"])
    server.model.set_parameters(by_prefix["server"])
    return cfg, seed, TrainedRun(spec, clients, server, train, test, [])

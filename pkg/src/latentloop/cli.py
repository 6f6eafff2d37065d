"""Command-line harness: train single models, sweep method grids, emit reports.

Subcommands:
  train   fit the configured model once per seed; writes weights + history
  sweep   run {baseline, deeper, looped grid, recurrence grid} x seeds and
          write one metric-record JSONL
  report  select best recurrence settings on validation, aggregate gains,
          ranks, and the depth-scaling series; writes report.json + report.txt

Exit codes: 0 ok, 2 bad config or input schema, 3 non-finite training abort,
4 incomplete sweep. Everything is driven by a single JSON config document;
config_hash is the sha256 of its canonical experiment sections.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import struct
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone

import numpy as np

from . import data as D
from . import tensor as T
from .attention import BlockConfig, StackConfig
from .forecaster import TSForecaster
from .pfn import PFNModel
from .recurrence import RecurrenceConfig
from .tabular import ThreeStageModel, TabularTask
from .training import ConfigError, OptimConfig, TrainingAbort, fit

WEIGHTS_MAGIC = b"LLTW"
WEIGHTS_VERSION = 1

R_TRAIN_GRID = (0, 1, 2, 4)
R_EVAL_GRID = (0, 1, 2, 4, 8)
LOOPED_GRID = ((1, 2), (1, 4), (4, 2), (4, 4))
METRIC_PRIORITY = ("auc", "accuracy", "neg_rmse", "mse_median")
SCHEMA_VERSION = 1


# -- config ---------------------------------------------------------------------


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    """Hash of the experiment identity: model, optim, data, sweep sections."""
    core = {k: cfg[k] for k in ("model", "optim", "data", "sweep") if k in cfg}
    return hashlib.sha256(canonical_json(core).encode()).hexdigest()[:16]


def _want(section, path, key, kinds, default=None, required=False, choices=None):
    if key not in section:
        if required:
            raise ConfigError(f"{path}.{key}: required field missing")
        return default
    v = section[key]
    if kinds is bool and not isinstance(v, bool):
        raise ConfigError(f"{path}.{key}: expected a boolean")
    if kinds is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise ConfigError(f"{path}.{key}: expected an integer")
    if kinds is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}.{key}: expected a number")
        v = float(v)
    if kinds is str and not isinstance(v, str):
        raise ConfigError(f"{path}.{key}: expected a string")
    if kinds is dict and not isinstance(v, dict):
        raise ConfigError(f"{path}.{key}: expected an object")
    if kinds is list and not isinstance(v, list):
        raise ConfigError(f"{path}.{key}: expected a list")
    if choices is not None and v not in choices:
        raise ConfigError(
            f"{path}.{key}: must be one of {', '.join(map(str, choices))}"
        )
    return v


def validate_config(raw):
    """Normalize a raw config dict, filling defaults. Errors carry the dotted
    field path so the user can find the offending entry."""
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    for key in raw:
        if key not in ("model", "optim", "data", "sweep", "seeds", "out"):
            raise ConfigError(f"{key}: unknown top-level section")

    model = raw.get("model")
    if not isinstance(model, dict):
        raise ConfigError("model: required section missing or not an object")
    family = _want(model, "model", "family", str, required=True,
                   choices=("ts", "tabular", "pfn"))
    m = {
        "family": family,
        "model_dim": _want(model, "model", "model_dim", int, 32),
        "n_heads": _want(model, "model", "n_heads", int, 4),
        "ffn_dim": _want(model, "model", "ffn_dim", int,
                         2 * model.get("model_dim", 32)),
        "n_layers": _want(model, "model", "n_layers", int, 2),
        "dropout": _want(model, "model", "dropout", float, 0.0),
        "feedback_hidden": _want(model, "model", "feedback_hidden", int, None),
        "max_step_embeddings": _want(model, "model", "max_step_embeddings",
                                     int, 8),
        "r_train": _want(model, "model", "r_train", int, 0),
        "r_eval": _want(model, "model", "r_eval", int,
                        model.get("r_train", 0)),
    }
    if m["model_dim"] < 1 or m["model_dim"] % m["n_heads"] != 0:
        raise ConfigError("model.model_dim: must be positive and divisible "
                          "by model.n_heads")
    if m["n_layers"] < 1:
        raise ConfigError("model.n_layers: must be >= 1")
    if not 0.0 <= m["dropout"] < 1.0:
        raise ConfigError("model.dropout: must be in [0, 1)")
    if m["r_train"] < 0 or m["r_eval"] < 0:
        raise ConfigError("model.r_train: recurrence counts must be >= 0")
    if family == "ts":
        m["patch_size"] = _want(model, "model", "patch_size", int, 8)
        if m["patch_size"] < 1:
            raise ConfigError("model.patch_size: must be >= 1")
        m["train_loss"] = _want(model, "model", "train_loss", str, "pinball",
                                choices=("pinball", "mse"))
    else:
        m["max_columns"] = _want(model, "model", "max_columns", int, 64)

    optim_raw = raw.get("optim", {})
    if not isinstance(optim_raw, dict):
        raise ConfigError("optim: must be an object")
    known = {f for f in OptimConfig.__dataclass_fields__}
    for key in optim_raw:
        if key not in known:
            raise ConfigError(f"optim.{key}: unknown field")
    try:
        optim = OptimConfig(**optim_raw)
        optim.validate()  # raises ConfigError with optim.* paths
    except TypeError as e:
        raise ConfigError(f"optim: invalid field value ({e})")

    data_raw = raw.get("data")
    if not isinstance(data_raw, dict):
        raise ConfigError("data: required section missing or not an object")
    d = _validate_data(data_raw, family, m)

    sweep_raw = raw.get("sweep", {})
    if not isinstance(sweep_raw, dict):
        raise ConfigError("sweep: must be an object")
    sweep = {
        "r_train_grid": _want(sweep_raw, "sweep", "r_train_grid", list,
                              list(R_TRAIN_GRID)),
        "r_eval_grid": _want(sweep_raw, "sweep", "r_eval_grid", list,
                             list(R_EVAL_GRID)),
        "looped_grid": _want(sweep_raw, "sweep", "looped_grid", list,
                             [list(p) for p in LOOPED_GRID]),
    }
    for g in ("r_train_grid", "r_eval_grid"):
        if not sweep[g] or any(
            isinstance(x, bool) or not isinstance(x, int) or x < 0
            for x in sweep[g]
        ):
            raise ConfigError(f"sweep.{g}: must be a nonempty list of "
                              "nonnegative integers")
    for pair in sweep["looped_grid"]:
        if (not isinstance(pair, list) or len(pair) != 2
                or any(not isinstance(x, int) or x < 1 for x in pair)):
            raise ConfigError("sweep.looped_grid: entries must be [K, M] "
                              "pairs of positive integers")

    seeds = raw.get("seeds", [0, 1, 2])
    if (not isinstance(seeds, list) or not seeds
            or any(isinstance(s, bool) or not isinstance(s, int)
                   for s in seeds)):
        raise ConfigError("seeds: must be a nonempty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: duplicate entries")

    out = {
        "model": m,
        "optim": {f: getattr(optim, f) for f in known},
        "data": d,
        "sweep": sweep,
        "seeds": seeds,
        "out": raw.get("out", "runs"),
    }
    return out


def _validate_data(data, family, model_cfg):
    source = _want(data, "data", "source", str, required=True,
                   choices=("synthetic", "csv"))
    d = {"source": source, "name": _want(data, "data", "name", str,
                                         required=True)}
    if family == "ts":
        d["context_len"] = _want(data, "data", "context_len", int, 64)
        d["horizon"] = _want(data, "data", "horizon", int, 16)
        d["stride"] = _want(data, "data", "stride", int, d["horizon"])
        d["fractions"] = _want(data, "data", "fractions", list,
                               [0.7, 0.1, 0.2])
        if d["horizon"] < 1 or d["context_len"] < 1 or d["stride"] < 1:
            raise ConfigError("data.horizon: window sizes must be >= 1")
        if d["context_len"] % model_cfg["patch_size"] != 0:
            raise ConfigError("data.context_len: must be divisible by "
                              "model.patch_size")
        if source == "synthetic":
            d["family"] = _want(data, "data", "family", str, required=True,
                                choices=("sinusoid_ar", "piecewise_trend",
                                         "regime_switching"))
            d["length"] = _want(data, "data", "length", int, 1024)
            d["channels"] = _want(data, "data", "channels", int, 1)
            d["params"] = _want(data, "data", "params", dict, {})
        else:
            d["path"] = _want(data, "data", "path", str, required=True)
    else:
        d["n_context"] = _want(data, "data", "n_context", int, 16)
        d["n_query"] = _want(data, "data", "n_query", int, 4)
        if d["n_context"] < 1 or d["n_query"] < 1:
            raise ConfigError("data.n_context: episode sizes must be >= 1")
        if source == "synthetic":
            d["family"] = _want(data, "data", "family", str, required=True,
                                choices=("linear_logit", "gaussian_clusters",
                                         "k_hop_lookup"))
            d["n_classes"] = _want(data, "data", "n_classes", int, 2)
            d["params"] = _want(data, "data", "params", dict, {})
            d["n_train_tasks"] = _want(data, "data", "n_train_tasks", int, 64)
            d["n_val_tasks"] = _want(data, "data", "n_val_tasks", int, 16)
            d["n_test_tasks"] = _want(data, "data", "n_test_tasks", int, 32)
        else:
            d["path"] = _want(data, "data", "path", str, required=True)
            d["target"] = _want(data, "data", "target", str, required=True)
            d["val_fraction"] = _want(data, "data", "val_fraction", float,
                                      0.15)
            d["test_fraction"] = _want(data, "data", "test_fraction", float,
                                       0.2)
            d["n_train_tasks"] = _want(data, "data", "n_train_tasks", int, 64)
            d["n_eval_tasks"] = _want(data, "data", "n_eval_tasks", int, 32)
    return d


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON ({e})")
    return validate_config(raw)


# -- weights file format ----------------------------------------------------------


def save_weights(path, params):
    """Little-endian binary: magic, version u32, then per parameter (sorted
    by name): name length u32, name bytes, rank u32, dims u32 each, payload
    f32."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", WEIGHTS_VERSION))
        for name in sorted(params):
            arr = np.asarray(params[name].data, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_weights(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError("not a weights file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights version {version}")
    pos = 8
    out = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        out[name] = arr.reshape(shape).copy()
    return out


def apply_weights(model, weights):
    params = model.parameters()
    missing = sorted(set(params) - set(weights))
    extra = sorted(set(weights) - set(params))
    if missing or extra:
        raise ValueError(f"weight name mismatch: missing {missing}, "
                         f"unexpected {extra}")
    for name, p in params.items():
        w = weights[name]
        if tuple(w.shape) != tuple(p.data.shape):
            raise ValueError(f"shape mismatch for {name}: "
                             f"{w.shape} vs {p.data.shape}")
        p.data = w.astype(T.default_dtype())


# -- dataset assembly --------------------------------------------------------------


def _data_seed(cfg, seed):
    """Each run seed sees its own reproducible data draw, shared by every
    method at that seed."""
    digest = hashlib.sha256(cfg["data"]["name"].encode()).digest()
    return [int.from_bytes(digest[:4], "little"), seed]


def build_ts_splits(cfg, seed):
    d = cfg["data"]
    if d["source"] == "synthetic":
        series = D.gen_synthetic_ts(
            d["family"], d["length"], d["channels"],
            seed=_data_seed(cfg, seed), **d["params"]
        )
    else:
        series = D.load_ts_csv(d["path"])
    segments = D.split_series(series, tuple(d["fractions"]))
    wins = [D.make_windows(s, d["context_len"], d["horizon"], d["stride"])
            for s in segments]
    for split, w in zip(("train", "val", "test"), wins):
        if not w:
            raise ConfigError(
                f"data.fractions: {split} segment too short for one "
                f"context+horizon window"
            )
    return wins


def build_tabular_splits(cfg, seed):
    d = cfg["data"]
    if d["source"] == "synthetic":
        total = d["n_train_tasks"] + d["n_val_tasks"] + d["n_test_tasks"]
        tasks = D.gen_tabular_tasks(
            d["family"], total, seed=_data_seed(cfg, seed),
            n_context=d["n_context"], n_query=d["n_query"],
            n_classes=d["n_classes"], **d["params"]
        )
        a, b = d["n_train_tasks"], d["n_train_tasks"] + d["n_val_tasks"]
        return tasks[:a], tasks[a:b], tasks[b:]
    return _episodes_from_csv(cfg, seed)


def _episodes_from_csv(cfg, seed):
    d = cfg["data"]
    # first pass only recovers targets for the split; encoders are refit on
    # the chosen train rows in the second pass
    _, y_all, meta = D.load_csv(d["path"], d["target"])
    rng = np.random.default_rng(_data_seed(cfg, seed))
    n = y_all.shape[0]
    if meta["target_kind"] == "categorical":
        rest, test_rows = D.stratified_split(y_all, d["test_fraction"], rng)
        rel_frac = d["val_fraction"] / max(1e-12, 1.0 - d["test_fraction"])
        train_rows, val_idx = D.stratified_split(y_all[rest], rel_frac, rng)
        train_rows, val_rows = rest[train_rows], rest[val_idx]
    else:
        perm = rng.permutation(n)
        n_test = int(round(n * d["test_fraction"]))
        n_val = int(round(n * d["val_fraction"]))
        test_rows = np.sort(perm[:n_test])
        val_rows = np.sort(perm[n_test:n_test + n_val])
        train_rows = np.sort(perm[n_test + n_val:])
    X, y, meta = D.load_csv(d["path"], d["target"], train_rows=train_rows)
    kind = ("classification" if meta["target_kind"] == "categorical"
            else "regression")
    n_classes = meta["n_classes"]
    if X.shape[1] < 1:
        raise ConfigError("data.path: file has no feature columns")
    if d["n_context"] > train_rows.size:
        raise ConfigError("data.n_context: larger than the training split")

    def episodes(query_rows, count, stream):
        out = []
        for _ in range(count):
            ctx = stream.choice(train_rows, size=d["n_context"],
                                replace=False)
            qry = stream.choice(query_rows, size=d["n_query"],
                                replace=d["n_query"] > query_rows.size)
            out.append(TabularTask(
                X[ctx], y[ctx], X[qry], kind=kind, n_classes=n_classes,
                y_query=y[qry],
            ))
        return out

    return (
        episodes(train_rows, d["n_train_tasks"], rng),
        episodes(val_rows, d["n_eval_tasks"], rng),
        episodes(test_rows, d["n_eval_tasks"], rng),
    )


# -- model assembly -------------------------------------------------------------------


def build_model(cfg, method_kind, method_args, seed, r_train):
    m = cfg["model"]
    block = BlockConfig(model_dim=m["model_dim"], n_heads=m["n_heads"],
                        ffn_dim=m["ffn_dim"], dropout=m["dropout"])
    if method_kind == "deeper":
        stack = StackConfig.deeper(m["n_layers"], block)
    elif method_kind == "looped":
        stack = StackConfig.looped(method_args[0], method_args[1], block)
    else:
        stack = StackConfig.plain(m["n_layers"], block)
    rec = RecurrenceConfig(r_train, max(r_train, cfg["model"]["r_eval"]),
                           m["max_step_embeddings"])
    ident = int.from_bytes(
        hashlib.sha256(f"{method_kind}{method_args}".encode()).digest()[:4],
        "little",
    )
    rng = np.random.default_rng([seed, ident])

    if m["family"] == "ts":
        d = cfg["data"]
        return TSForecaster(
            patch_size=m["patch_size"],
            max_context_patches=d["context_len"] // m["patch_size"],
            max_query_patches=math.ceil(d["horizon"] / m["patch_size"]),
            stack_cfg=stack,
            recurrence=rec,
            rng=rng,
            feedback_hidden=m["feedback_hidden"],
            train_loss=m["train_loss"],
        )
    if m["family"] == "tabular":
        kind, n_classes = _task_shape(cfg)
        return ThreeStageModel(
            kind=kind, icl_cfg=stack, recurrence=rec, rng=rng,
            n_classes=n_classes, max_columns=m["max_columns"],
            feedback_hidden=m["feedback_hidden"],
        )
    # pfn: layers are structural, so deeper/looped map onto layer count and
    # in-place repeats
    n_layers = m["n_layers"] * (2 if method_kind == "deeper" else 1)
    repeats = 1
    if method_kind == "looped":
        n_layers, repeats = method_args
    kind, n_classes = _task_shape(cfg)
    if kind != "classification":
        raise ConfigError("model.family: pfn supports classification only")
    return PFNModel(
        recurrence=rec, rng=rng, n_layers=n_layers,
        model_dim=m["model_dim"], n_heads=m["n_heads"], ffn_dim=m["ffn_dim"],
        n_classes=n_classes, dropout=m["dropout"],
        feedback_hidden=m["feedback_hidden"], max_columns=m["max_columns"],
        repeats=repeats,
    )


def _task_shape(cfg):
    d = cfg["data"]
    if d["source"] == "synthetic":
        return "classification", d["n_classes"]
    _, _, meta = D.load_csv(d["path"], d["target"])
    if meta["target_kind"] == "categorical":
        return "classification", meta["n_classes"]
    return "regression", 0


# -- evaluation --------------------------------------------------------------------


def eval_ts(model, windows, n_rec):
    mets = model.eval_metrics(windows, n_rec=n_rec)
    return {"mse_median": mets["mse_median"], "pinball": mets["pinball"]}


def eval_tabular(model, tasks, n_rec):
    kind = getattr(model, "kind", "classification")
    preds, targets, scores = [], [], []
    for t in tasks:
        if kind == "classification":
            p = model.predict_proba(t, n_rec=n_rec)
            preds.append(np.argmax(p, axis=-1))
            scores.append(p[:, 1] if p.shape[-1] == 2 else None)
        else:
            preds.append(model.predict(t, n_rec=n_rec))
        targets.append(t.y_query)
    y = np.concatenate(targets)
    yhat = np.concatenate(preds)
    if kind == "regression":
        return {"neg_rmse": D.neg_rmse(yhat, y)}
    out = {"accuracy": D.accuracy(yhat, y)}
    if scores[0] is not None:
        try:
            out["auc"] = D.auc_score(np.concatenate(scores), y)
        except D.UndefinedMetricError:
            pass  # split happens to be single-class; skip the record
    return out


def primary_metric(metrics_present):
    for m in METRIC_PRIORITY:
        if m in metrics_present:
            return m
    raise ValueError(f"no known metric among {sorted(metrics_present)}")


# -- sweep cells -------------------------------------------------------------------


def _method_cells(cfg):
    """(kind, args) pairs; each is one training run. A cot cell is trained
    once at r_train and evaluated across the whole r_eval grid."""
    cells = [("baseline", ()), ("deeper", ())]
    cells += [("looped", tuple(p)) for p in cfg["sweep"]["looped_grid"]]
    cells += [("cot", (rt,)) for rt in cfg["sweep"]["r_train_grid"]]
    return cells


def _train_one(cfg, model, splits, seed, history_path=None):
    fam = cfg["model"]["family"]
    train, val, _ = splits
    optim = OptimConfig(**cfg["optim"])
    if fam == "ts":
        def loss_fn(mdl, batch, rng):
            return mdl.loss_on_batch(batch, rng)

        def val_fn(mdl, data):
            # early stopping watches the depth the model is trained at
            return mdl.eval_metrics(
                data, n_rec=mdl.recurrence.n_train)["mse_median"]

        mode = "min"
    else:
        def loss_fn(mdl, batch, rng):
            return mdl.loss_on_batch(batch, rng)

        def val_fn(mdl, data):
            mets = eval_tabular(mdl, data, n_rec=mdl.recurrence.n_train)
            return mets[primary_metric(mets)]

        mode = "max"
    return fit(model, train, val, optim, seed, loss_fn=loss_fn,
               val_fn=val_fn, val_mode=mode, history_path=history_path)


def run_cell(payload):
    """One (method, seed) sweep cell. Module-level so process pools can pick
    it up. Returns plain record dicts."""
    cfg, kind, args, seed, precision = payload
    T.set_default_dtype(np.float64 if precision == "f64" else np.float32)
    fam = cfg["model"]["family"]
    splits = (build_ts_splits(cfg, seed) if fam == "ts"
              else build_tabular_splits(cfg, seed))
    chash = config_hash(cfg)
    ds = cfg["data"]["name"]

    r_train = args[0] if kind == "cot" else 0
    model = build_model(cfg, kind, args, seed, r_train)
    _train_one(cfg, model, splits, seed)

    evaluator = eval_ts if fam == "ts" else eval_tabular
    records = []

    def emit(method, split, mets):
        for name, value in sorted(mets.items()):
            records.append(dict(dataset=ds, method=method, seed=seed,
                                split=split, metric=name, value=float(value),
                                config_hash=chash))

    if kind == "cot":
        for r_eval in cfg["sweep"]["r_eval_grid"]:
            method = D.cot_method(r_train, r_eval)
            emit(method, "val", evaluator(model, splits[1], r_eval))
            emit(method, "test", evaluator(model, splits[2], r_eval))
    else:
        method = {"baseline": "baseline", "deeper": "deeper"}.get(kind) or \
            D.looped_method(*args)
        emit(method, "val", evaluator(model, splits[1], 0))
        emit(method, "test", evaluator(model, splits[2], 0))
    return records


# -- subcommands ---------------------------------------------------------------------


def cmd_train(args):
    cfg = load_config(args.config)
    seeds = _resolve_seeds(args, cfg)
    out_dir = args.out or cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    fam = cfg["model"]["family"]
    summary = {"config_hash": config_hash(cfg), "precision": args.precision,
               "seeds": {}}
    for seed in seeds:
        splits = (build_ts_splits(cfg, seed) if fam == "ts"
                  else build_tabular_splits(cfg, seed))
        model = build_model(cfg, "baseline", (), seed,
                            cfg["model"]["r_train"])
        history = os.path.join(out_dir, f"history_seed{seed}.jsonl")
        res = _train_one(cfg, model, splits, seed, history_path=history)
        wpath = os.path.join(out_dir, f"weights_seed{seed}.lltw")
        save_weights(wpath, model.parameters())
        summary["seeds"][str(seed)] = {
            "best_val": res.best_val,
            "best_epoch": res.best_epoch,
            "steps": res.steps,
            "stopped_early": res.stopped_early,
            "weights": os.path.basename(wpath),
            "history": os.path.basename(history),
        }
        print(f"seed {seed}: best val {res.best_val:.6g} "
              f"(epoch {res.best_epoch}, {res.steps} steps)")
    with open(os.path.join(out_dir, "train_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_sweep(args):
    cfg = load_config(args.config)
    seeds = _resolve_seeds(args, cfg)
    out_dir = args.out or cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    payloads = [
        (cfg, kind, cell_args, seed, args.precision)
        for kind, cell_args in _method_cells(cfg)
        for seed in seeds
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            chunks = list(pool.map(run_cell, payloads))
    else:
        chunks = [run_cell(p) for p in payloads]
    records = [D.MetricRecord(**r) for chunk in chunks for r in chunk]
    path = os.path.join(out_dir, "records.jsonl")
    D.write_records(path, records)
    print(f"wrote {len(records)} records to {path}")
    return 0


def _select_best_looped(records, metric_name, higher_better, required):
    """Validation-chosen looped variant per dataset; ties prefer the smaller
    effective depth K*M, then smaller K."""
    by_ds = {}
    for r in records:
        if (r.split != "val" or r.metric != metric_name
                or D.method_family(r.method) != "looped"):
            continue
        km = D.parse_method_args(r.method)
        by_ds.setdefault(r.dataset, {}).setdefault(km, []).append(r.value)
    chosen = {}
    for ds, cands in sorted(by_ds.items()):
        missing = sorted(set(required) - set(cands))
        if missing:
            raise D.IncompleteSweepError(
                f"dataset {ds!r} missing looped validation cells: {missing}"
            )

        def sort_key(item):
            (k, m), vals = item
            mean = float(np.mean(vals))
            return (-mean if higher_better else mean, k * m, k)

        chosen[ds] = min(cands.items(), key=sort_key)[0]
    return chosen


def _depth_series(records, cfg, dataset_metric):
    """Mean paired gain vs baseline as a function of evaluation depth. Each
    depth r pairs with the model trained at r when that exists, otherwise
    the deepest (or shallowest, below the grid) trained depth."""
    r_train_grid = sorted(cfg["sweep"]["r_train_grid"])
    by_key = {}
    for r in records:
        if r.split == "test":
            by_key[(r.dataset, r.method, r.seed, r.metric)] = r.value

    series = {}
    for r_eval in sorted(cfg["sweep"]["r_eval_grid"]):
        if r_eval in r_train_grid:
            r_train = r_eval
        elif r_eval > r_train_grid[-1]:
            r_train = r_train_grid[-1]
        else:
            r_train = r_train_grid[0]
        method = D.cot_method(r_train, r_eval)
        per_metric = {}
        for ds, metric_name in sorted(dataset_metric.items()):
            hb = D.HIGHER_BETTER[metric_name]
            gains = []
            seeds = sorted({
                s for (d_, m_, s, k_) in by_key
                if d_ == ds and m_ == "baseline" and k_ == metric_name
            })
            if not seeds:
                raise D.IncompleteSweepError(
                    f"depth series: no baseline test records for {ds!r}"
                )
            for seed in seeds:
                base = by_key.get((ds, "baseline", seed, metric_name))
                val = by_key.get((ds, method, seed, metric_name))
                if base is None or val is None:
                    raise D.IncompleteSweepError(
                        f"depth series missing cell: dataset {ds!r}, "
                        f"method {method!r}, seed {seed}, {metric_name}"
                    )
                gains.append(D._gain(base, val, hb))
            per_metric.setdefault(metric_name, []).append(
                float(np.mean(gains)))
        for metric_name, ds_gains in per_metric.items():
            stderr = (float(np.std(ds_gains, ddof=1) / np.sqrt(len(ds_gains)))
                      if len(ds_gains) > 1 else 0.0)
            series.setdefault(metric_name, []).append({
                "r_eval": r_eval,
                "r_train": r_train,
                "method": method,
                "mean_gain": float(np.mean(ds_gains)),
                "stderr_gain": stderr,
                "n_datasets": len(ds_gains),
            })
    return [{"metric": m, "points": pts} for m, pts in sorted(series.items())]


def cmd_report(args):
    cfg = load_config(args.config)
    out_dir = args.out or cfg["out"]
    rec_path = os.path.join(out_dir, "records.jsonl")
    if not os.path.exists(rec_path):
        raise D.IncompleteSweepError(f"no records file at {rec_path}")
    records = D.read_records(rec_path)

    dataset_metric = {}
    for ds in sorted({r.dataset for r in records}):
        present = {r.metric for r in records if r.dataset == ds}
        dataset_metric[ds] = primary_metric(present)

    grid = {(rt, re) for rt in cfg["sweep"]["r_train_grid"]
            for re in cfg["sweep"]["r_eval_grid"]}
    looped_grid = {tuple(p) for p in cfg["sweep"]["looped_grid"]}

    best_cot, best_looped = {}, {}
    for ds, metric_name in dataset_metric.items():
        ds_records = [r for r in records if r.dataset == ds]
        hb = D.HIGHER_BETTER[metric_name]
        best_cot.update(D.select_best_R(
            ds_records, metric_name=metric_name, higher_better=hb,
            required=grid,
        ))
        best_looped.update(_select_best_looped(
            ds_records, metric_name, hb, looped_grid,
        ))

    keep = []
    for r in records:
        if r.split != "test":
            continue
        fam = D.method_family(r.method)
        if fam in ("baseline", "deeper"):
            keep.append(r)
        elif fam == "cot" and D.parse_method_args(r.method) == \
                best_cot[r.dataset]:
            keep.append(r)
        elif fam == "looped" and D.parse_method_args(r.method) == \
                best_looped[r.dataset]:
            keep.append(r)

    groups = {}
    for metric_name in sorted(set(dataset_metric.values())):
        members = [r for r in keep
                   if dataset_metric[r.dataset] == metric_name
                   and r.metric == metric_name]
        groups[metric_name] = D.aggregate(
            members, metric_name=metric_name,
            higher_better=D.HIGHER_BETTER[metric_name],
        )

    report = {
        "schema_version": SCHEMA_VERSION,
        "metadata": {
            "created_at": datetime.now(timezone.utc).isoformat(),
            "config_hash": config_hash(cfg),
            "n_records": len(records),
        },
        "selected": {
            "cot": {ds: D.cot_method(*rt_re)
                    for ds, rt_re in sorted(best_cot.items())},
            "looped": {ds: D.looped_method(*km)
                       for ds, km in sorted(best_looped.items())},
        },
        "groups": groups,
        "depth_series": _depth_series(records, cfg, dataset_metric),
    }
    json_path = os.path.join(out_dir, "report.json")
    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    txt_path = os.path.join(out_dir, "report.txt")
    with open(txt_path, "w") as fh:
        fh.write(render_report_text(report))
    print(f"wrote {json_path} and {txt_path}")
    return 0


def render_report_text(report):
    lines = []
    for metric_name, agg in sorted(report["groups"].items()):
        n = len(agg["datasets"])
        lines.append(f"metric: {metric_name}   datasets: {n}   "
                     f"({'higher' if agg['higher_better'] else 'lower'} "
                     "is better)")
        lines.append(f"{'method':<12}{'gain%':>10}{'stderr%':>10}"
                     f"{'wins':>8}{'rank':>8}")
        fams = sorted(agg["families"])
        for fam in fams:
            f = agg["families"][fam]
            lines.append(
                f"{fam:<12}{100 * f['mean_gain']:>10.2f}"
                f"{100 * f['stderr_gain']:>10.2f}"
                f"{f['wins']:>5}/{f['n_datasets']:<2}"
                f"{f['mean_rank']:>8.2f}"
            )
        lines.append("")
    for series in report["depth_series"]:
        lines.append(f"depth scaling ({series['metric']}):")
        lines.append(f"{'r_eval':>8}{'method':>14}{'gain%':>10}"
                     f"{'stderr%':>10}")
        for p in series["points"]:
            lines.append(
                f"{p['r_eval']:>8}{p['method']:>14}"
                f"{100 * p['mean_gain']:>10.2f}"
                f"{100 * p['stderr_gain']:>10.2f}"
            )
        lines.append("")
    return "\n".join(lines) + "\n"


# -- entry point -------------------------------------------------------------------


def _resolve_seeds(args, cfg):
    if args.seed:
        try:
            return [int(s) for s in args.seed.split(",")]
        except ValueError:
            raise ConfigError("--seed: expected comma-separated integers")
    env = os.environ.get("LATENTLOOP_SEED")
    if env:
        try:
            return [int(s) for s in env.split(",")]
        except ValueError:
            raise ConfigError("LATENTLOOP_SEED: expected comma-separated "
                              "integers")
    return cfg["seeds"]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="latentloop",
        description="Train, sweep, and report on latent-recurrence models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("train", cmd_train), ("sweep", cmd_sweep),
                     ("report", cmd_report)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", default=None,
                       help="output dir (default: config 'out' field)")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel sweep cells")
        p.add_argument("--seed", default=None,
                       help="comma-separated seed list override")
        p.add_argument("--precision", choices=("f32", "f64"), default="f32")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    T.set_default_dtype(np.float64 if args.precision == "f64" else np.float32)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (D.SchemaError, D.LoadError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 2
    except (TrainingAbort, T.NumericError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (D.IncompleteSweepError, D.PairingError) as e:
        print(f"incomplete sweep: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Datasets, synthetic generators, splits, metrics, and result aggregation.

Everything here is plain numpy: CSV ingestion with train-split-fitted encoding
and imputation, reproducible synthetic time-series and tabular task families,
temporal and stratified splits, rank-statistic metrics, JSONL metric records,
validation-based recurrence-depth selection, and the gain/rank aggregation
used by the report command.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .forecaster import mse_of_median as _mse_of_median
from .forecaster import pinball_loss as _pinball_loss
from .tensor import Tensor


class LoadError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


class PairingError(ValueError):
    pass


class IncompleteSweepError(RuntimeError):
    pass


# -- metrics -------------------------------------------------------------------


def auc_score(scores, labels):
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Ties among scores contribute half weight; a single-class label vector has
    no defined AUC and raises.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-d arrays")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined: only one class present")
    ranks = rankdata(scores)  # average rank for ties
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(predictions, targets):
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.ndim == targets.ndim + 1:
        predictions = np.argmax(predictions, axis=-1)
    return float((predictions == targets).mean())


def neg_rmse(predictions, targets):
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    return float(-np.sqrt(((predictions - targets) ** 2).mean()))


def metric(kind, predictions, targets):
    """Uniform entry point for every metric name used in records."""
    if kind == "auc":
        return auc_score(predictions, targets)
    if kind == "accuracy":
        return accuracy(predictions, targets)
    if kind == "neg_rmse":
        return neg_rmse(predictions, targets)
    if kind == "mse_median":
        return float(_mse_of_median(Tensor(np.asarray(predictions)), targets).data)
    if kind == "pinball":
        return float(_pinball_loss(Tensor(np.asarray(predictions)), targets).data)
    raise ValueError(f"unknown metric kind: {kind!r}")


HIGHER_BETTER = {"auc": True, "accuracy": True, "neg_rmse": True,
                 "mse_median": False, "pinball": False}


# -- metric records ---------------------------------------------------------------


@dataclass(frozen=True)
class MetricRecord:
    dataset: str
    method: str
    seed: int
    split: str  # train | val | test
    metric: str
    value: float
    config_hash: str

    def key(self):
        return (self.dataset, self.method, self.seed, self.split, self.metric)


def _check_unique(records):
    seen = {}
    for r in records:
        k = r.key()
        if k in seen:
            raise ValueError(f"duplicate metric record: {k}")
        seen[k] = r


def write_records(path, records):
    """Write records as sorted canonical JSON lines (stable bytes)."""
    records = sorted(records, key=lambda r: r.key())
    _check_unique(records)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_records(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(MetricRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as e:
                raise LoadError(f"bad record on line {i + 1}: {e}") from e
    _check_unique(out)
    return out


def method_family(method):
    return method.split("(", 1)[0]


def cot_method(r_train, r_eval):
    return f"cot({r_train},{r_eval})"


def looped_method(k, m):
    return f"looped({k},{m})"


def parse_method_args(method):
    """'cot(2,4)' -> (2, 4); 'baseline' -> ()."""
    if "(" not in method:
        return ()
    inner = method[method.index("(") + 1:method.rindex(")")]
    return tuple(int(x) for x in inner.split(","))


# -- splits -------------------------------------------------------------------------


def temporal_split(n, fractions=(0.7, 0.1, 0.2)):
    """Contiguous, ordered (train, val, test) index ranges covering 0..n."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be nonnegative and sum to 1")
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    train = np.arange(0, n_train)
    val = np.arange(n_train, n_train + n_val)
    test = np.arange(n_train + n_val, n)
    return train, val, test


def stratified_split(labels, holdout_fraction, rng):
    """(rest_idx, holdout_idx): per-class proportional random holdout."""
    labels = np.asarray(labels)
    holdout = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(idx.size * holdout_fraction))
        holdout.extend(idx[:k])
    holdout = np.sort(np.asarray(holdout, dtype=np.int64))
    rest = np.setdiff1d(np.arange(labels.size), holdout)
    return rest, holdout


def stratified_kfold(labels, k, rng):
    """K (train_idx, test_idx) pairs; per-fold class counts are within one of
    proportional (round-robin deal per class after a shuffle)."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("need k >= 2 folds")
    folds = [[] for _ in range(k)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        for j, i in enumerate(idx):
            folds[j % k].append(int(i))
    out = []
    everything = np.arange(labels.size)
    for f in folds:
        test = np.sort(np.asarray(f, dtype=np.int64))
        out.append((np.setdiff1d(everything, test), test))
    return out


# -- CSV ingestion ----------------------------------------------------------------


def load_ts_csv(path):
    """All-numeric CSV with a header row -> [T, C] float array, one channel
    per column."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise LoadError("need a header row and at least one data row")
    header, body = rows[0], rows[1:]
    out = np.zeros((len(body), len(header)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise LoadError(
                f"row {i + 1}: expected {len(header)} fields, got {len(row)}"
            )
        for j, cell in enumerate(row):
            v = _parse_float(cell)
            if v is None:
                raise LoadError(
                    f"row {i + 1}, column {header[j]!r}: cannot parse {cell!r}"
                )
            out[i, j] = v
    return out


def _parse_float(cell):
    try:
        return float(cell)
    except ValueError:
        return None


def load_csv(path, target, *, schema=None, train_rows=None):
    """Load a header-row CSV into (X, y, meta).

    Categorical feature columns are ordinal-encoded in first-appearance order
    over the training rows (then over the remaining rows for categories the
    training split never saw). Missing numeric cells ('' only) are imputed
    with the training-split column mean. `schema` may pin columns to
    'numeric' or 'categorical'; a non-numeric cell in a pinned-numeric column
    is a load error naming the row and column.
    """
    schema = schema or {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise LoadError("empty file")
    header, body = rows[0], rows[1:]
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise LoadError(
                f"row {i + 1}: expected {len(header)} fields, got {len(row)}"
            )
    if target not in header:
        raise SchemaError(f"target column {target!r} not found in header")
    if not body:
        raise LoadError("no data rows")
    n = len(body)
    train_rows = np.arange(n) if train_rows is None else np.asarray(train_rows)
    train_set = set(train_rows.tolist())
    order = list(train_rows) + [i for i in range(n) if i not in train_set]

    t_idx = header.index(target)
    feat_names = [h for j, h in enumerate(header) if j != t_idx]
    columns = []
    kinds = []
    for j, name in enumerate(header):
        if j == t_idx:
            continue
        cells = [row[j] for row in body]
        declared = schema.get(name)
        parsed = [_parse_float(c) if c != "" else np.nan for c in cells]
        bad = next(
            (i for i, p in enumerate(parsed) if p is None), None
        )
        if declared == "numeric" and bad is not None:
            raise LoadError(
                f"row {bad + 1}, column {name!r}: cannot parse {cells[bad]!r}"
            )
        numeric = declared == "numeric" or (declared is None and bad is None)
        if declared == "categorical":
            numeric = False
        if numeric:
            col = np.asarray(parsed, dtype=np.float64)
            train_vals = col[train_rows]
            fill = float(np.nanmean(train_vals)) if np.any(
                ~np.isnan(train_vals)) else 0.0
            col = np.where(np.isnan(col), fill, col)
            kinds.append("numeric")
        else:
            codes = {}
            for i in order:
                codes.setdefault(cells[i], len(codes))
            col = np.asarray([codes[c] for c in cells], dtype=np.float64)
            kinds.append("categorical")
        columns.append(col)

    t_cells = [row[t_idx] for row in body]
    for i, c in enumerate(t_cells):
        if c == "":
            raise LoadError(f"row {i + 1}, column {target!r}: missing target")
    t_parsed = [_parse_float(c) for c in t_cells]
    if schema.get(target) != "categorical" and all(p is not None for p in t_parsed):
        y = np.asarray(t_parsed, dtype=np.float64)
        target_kind, n_classes = "numeric", 0
    else:
        codes = {}
        for i in order:
            codes.setdefault(t_cells[i], len(codes))
        y = np.asarray([codes[c] for c in t_cells], dtype=np.int64)
        target_kind, n_classes = "categorical", len(codes)

    X = np.stack(columns, axis=1) if columns else np.zeros((n, 0))
    meta = {
        "features": feat_names,
        "kinds": kinds,
        "target_kind": target_kind,
        "n_classes": n_classes,
    }
    return X, y, meta


# -- synthetic time series -----------------------------------------------------------


def _ar1(rng, t, phi, scale):
    eps = rng.normal(size=t) * scale
    out = np.zeros(t)
    for i in range(1, t):
        out[i] = phi * out[i - 1] + eps[i]
    return out


def gen_synthetic_ts(family, length, channels=1, *, seed, **params):
    """Reproducible [length, channels] series from a named family."""
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    out = np.zeros((length, channels))

    if family == "sinusoid_ar":
        periods = params.get("periods", (24.0, 96.0))
        amplitudes = params.get("amplitudes", (1.0, 0.5))
        phi = params.get("phi", 0.7)
        noise = params.get("noise_scale", 0.1)
        for c in range(channels):
            x = np.zeros(length)
            for p, a in zip(periods, amplitudes):
                phase = rng.uniform(0, 2 * np.pi) if params.get(
                    "random_phase", True) else 0.0
                x += a * np.sin(2 * np.pi * t / p + phase)
            if noise > 0:
                x += _ar1(rng, length, phi, noise)
            out[:, c] = x
        return out

    if family == "piecewise_trend":
        n_seg = params.get("n_segments", 6)
        slope_scale = params.get("slope_scale", 0.05)
        noise = params.get("noise_scale", 0.1)
        for c in range(channels):
            cuts = np.sort(rng.choice(np.arange(1, length), n_seg - 1,
                                      replace=False))
            bounds = np.concatenate([[0], cuts, [length]])
            x = np.zeros(length)
            level = 0.0
            for a, b in zip(bounds[:-1], bounds[1:]):
                slope = rng.normal() * slope_scale
                seg = level + slope * np.arange(b - a)
                x[a:b] = seg
                level = seg[-1] if b > a else level
            x += rng.normal(size=length) * noise
            out[:, c] = x
        return out

    if family == "regime_switching":
        p_switch = params.get("p_switch", 0.02)
        regimes = params.get("regimes", ((12.0, 1.0, 0.0), (48.0, 0.6, 2.0)))
        noise = params.get("noise_scale", 0.1)
        for c in range(channels):
            state = int(rng.integers(len(regimes)))
            phase = rng.uniform(0, 2 * np.pi)
            x = np.zeros(length)
            for i in range(length):
                if rng.random() < p_switch:
                    state = int(rng.integers(len(regimes)))
                period, amp, mean = regimes[state]
                x[i] = mean + amp * np.sin(2 * np.pi * i / period + phase)
            x += rng.normal(size=length) * noise
            out[:, c] = x
        return out

    raise ValueError(f"unknown time-series family: {family!r}")


def make_windows(series, context_len, horizon, stride=1):
    """Sliding (context, target) pairs fully inside the series."""
    series = np.asarray(series)
    t = series.shape[0]
    out = []
    start = 0
    while start + context_len + horizon <= t:
        out.append((series[start:start + context_len],
                    series[start + context_len:start + context_len + horizon]))
        start += stride
    return out


def split_series(series, fractions=(0.7, 0.1, 0.2)):
    """Cut the series into contiguous (train, val, test) segments. Windows are
    built inside each segment, so no split ever sees another split's
    timestamps."""
    tr, va, te = temporal_split(series.shape[0], fractions)
    return series[tr], series[va], series[te]


# -- synthetic tabular task families ----------------------------------------------------


def _unique_keys(rng, count, dim, min_gap=0.5, max_tries=1000, restarts=50):
    """Random unit-norm keys with pairwise distance at least min_gap.

    Rejection-sampled one key at a time. A nearly-full sphere can strand the
    sampler (earlier keys fragment the remaining room), so after max_tries
    failed draws the whole set is thrown away and resampled; after `restarts`
    such attempts the instance is treated as infeasible and raises (e.g. 16
    keys on the unit circle at gap 0.5 cannot exist)."""
    for _ in range(restarts):
        keys = []
        tries = 0
        while tries < max_tries:
            tries += 1
            k = rng.normal(size=dim)
            k /= np.linalg.norm(k)
            if all(np.linalg.norm(k - q) >= min_gap for q in keys):
                keys.append(k)
                if len(keys) == count:
                    return np.stack(keys)
    raise ValueError(
        f"could not place {count} unit keys of dim {dim} with pairwise gap "
        f"{min_gap} after {restarts} attempts of {max_tries} draws; lower "
        "the count or gap, or raise the dimension"
    )


def gen_tabular_tasks(family, n_tasks, *, seed, n_context=16, n_query=4,
                      n_classes=2, **params):
    """Reproducible list of TabularTask with exact ground-truth query labels."""
    from .tabular import TabularTask

    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(n_tasks):
        if family == "linear_logit":
            d = params.get("d", 4)
            w = rng.normal(size=d)
            x_c = rng.normal(size=(n_context, d))
            x_q = rng.normal(size=(n_query, d))
            y_c = (x_c @ w > 0).astype(np.int64)
            y_q = (x_q @ w > 0).astype(np.int64)
            task = TabularTask(x_c, y_c, x_q, kind="classification",
                               n_classes=2, y_query=y_q)
            task.w = w
            tasks.append(task)
        elif family == "gaussian_clusters":
            d = params.get("d", 4)
            sep = params.get("separation", 3.0)
            centers = rng.normal(size=(n_classes, d)) * sep
            y_c = rng.integers(0, n_classes, size=n_context)
            y_q = rng.integers(0, n_classes, size=n_query)
            x_c = centers[y_c] + rng.normal(size=(n_context, d))
            x_q = centers[y_q] + rng.normal(size=(n_query, d))
            task = TabularTask(x_c, y_c, x_q, kind="classification",
                               n_classes=n_classes, y_query=y_q)
            task.centers = centers
            tasks.append(task)
        elif family == "k_hop_lookup":
            tasks.append(_k_hop_task(rng, params.get("k", 2),
                                     params.get("key_dim", 4),
                                     n_context, n_query, n_classes))
        else:
            raise ValueError(f"unknown tabular family: {family!r}")
    return tasks


def _k_hop_task(rng, k, key_dim, n_context, n_query, n_classes):
    """Pointer-chasing construction: row i holds (key_i, key_perm(i)); the
    query carries key_i in its key slot and zeros in the pointer slot, and its
    label is the label of the row reached after following k-1 pointer hops
    from row i. With k=1 this is exact nearest-key lookup."""
    from .tabular import TabularTask

    if k < 1:
        raise ValueError("need k >= 1 hops")
    keys = _unique_keys(rng, n_context, key_dim)
    perm = rng.permutation(n_context)
    y_ctx = rng.integers(0, n_classes, size=n_context)
    x_c = np.concatenate([keys, keys[perm]], axis=1)

    starts = rng.integers(0, n_context, size=n_query)
    x_q = np.concatenate([keys[starts], np.zeros((n_query, key_dim))], axis=1)
    end = starts.copy()
    for _ in range(k - 1):
        end = perm[end]
    y_q = y_ctx[end]
    task = TabularTask(x_c, y_ctx, x_q, kind="classification",
                       n_classes=n_classes, y_query=y_q)
    task.hops = k
    return task


def bayes_predict_clusters(task):
    """Density-oracle prediction for gaussian_clusters tasks (equal priors,
    unit covariance): nearest true center."""
    centers = task.centers
    d2 = ((task.x_query[:, None, :] - centers[None]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=-1)


def khop_oracle_predict(task):
    """Exact chain-following oracle for k_hop_lookup tasks: match the query
    key to a context row by nearest key, then follow pointer cells (each a
    stored key) for the remaining hops and report that row's label."""
    key_dim = task.x_context.shape[1] // 2
    keys = task.x_context[:, :key_dim]
    ptrs = task.x_context[:, key_dim:]
    out = []
    for q in task.x_query:
        row = int(np.argmin(((keys - q[:key_dim]) ** 2).sum(axis=1)))
        for _ in range(task.hops - 1):
            row = int(np.argmin(((keys - ptrs[row]) ** 2).sum(axis=1)))
        out.append(task.y_context[row])
    return np.asarray(out, dtype=np.int64)


# -- CoT depth selection -----------------------------------------------------------------


def select_best_R(records, *, metric_name, higher_better, required=None):
    """Per-dataset (R_train, R_eval) chosen on validation records.

    Candidates are cot(rt,re) val-split records averaged over seeds; ties go
    to the smaller (R_eval, R_train), the cheaper evaluation. `required` is an
    optional set of (rt, re) pairs that must be present for every dataset."""
    by_ds = {}
    for r in records:
        if r.split != "val" or r.metric != metric_name:
            continue
        if method_family(r.method) != "cot":
            continue
        rt, re = parse_method_args(r.method)
        by_ds.setdefault(r.dataset, {}).setdefault((rt, re), []).append(r.value)
    if not by_ds:
        raise IncompleteSweepError("no cot validation records found")
    chosen = {}
    for ds, cands in sorted(by_ds.items()):
        if required:
            missing = sorted(set(required) - set(cands))
            if missing:
                raise IncompleteSweepError(
                    f"dataset {ds!r} missing cot validation cells: {missing}"
                )
        def sort_key(item):
            (rt, re), vals = item
            mean = float(np.mean(vals))
            primary = -mean if higher_better else mean
            return (primary, re, rt)

        chosen[ds] = min(cands.items(), key=sort_key)[0]
    return chosen


# -- aggregation ---------------------------------------------------------------------------


def _gain(base, value, higher_better):
    if base == 0:
        raise ValueError("cannot compute relative gain against a zero baseline")
    if higher_better:
        return (value - base) / abs(base)
    return (base - value) / abs(base)


def aggregate(records, *, metric_name, higher_better, baseline_family="baseline"):
    """Per-dataset per-seed gains vs the baseline, dataset means, the domain
    mean with stderr over datasets, win counts, and tie-averaged ranks.

    Expects test-split records with exactly one method id per family per
    dataset (the report command feeds it pre-selected best variants)."""
    test = [r for r in records if r.split == "test" and r.metric == metric_name]
    if not test:
        raise ValueError(f"no test records for metric {metric_name!r}")
    by_ds = {}
    for r in test:
        fam = method_family(r.method)
        slot = by_ds.setdefault(r.dataset, {}).setdefault(fam, {})
        slot.setdefault("method", r.method)
        if slot["method"] != r.method:
            raise ValueError(
                f"dataset {r.dataset!r}: multiple {fam} variants "
                f"({slot['method']}, {r.method}); select one before aggregating"
            )
        if r.seed in slot.get("seeds", {}):
            raise ValueError(f"duplicate record {r.key()}")
        slot.setdefault("seeds", {})[r.seed] = r.value

    datasets = sorted(by_ds)
    families = sorted({f for ds in by_ds.values() for f in ds})
    if baseline_family not in families:
        raise PairingError(f"no {baseline_family!r} records to compare against")

    out = {
        "metric": metric_name,
        "higher_better": higher_better,
        "datasets": datasets,
        "families": {},
        "ranks_per_dataset": {},
    }
    for ds in datasets:
        base_slot = by_ds[ds].get(baseline_family)
        if base_slot is None:
            raise PairingError(f"dataset {ds!r} has no baseline records")
        base_seeds = sorted(base_slot["seeds"])
        for fam in by_ds[ds]:
            seeds = sorted(by_ds[ds][fam]["seeds"])
            if seeds != base_seeds:
                raise PairingError(
                    f"dataset {ds!r}, family {fam!r}: seeds {seeds} do not "
                    f"match baseline seeds {base_seeds}"
                )

    for fam in families:
        per_dataset = {}
        for ds in datasets:
            slot = by_ds[ds].get(fam)
            if slot is None:
                continue
            base = by_ds[ds][baseline_family]["seeds"]
            gains = [
                _gain(base[s], slot["seeds"][s], higher_better)
                for s in sorted(slot["seeds"])
            ]
            per_dataset[ds] = {
                "method": slot["method"],
                "per_seed_gain": gains,
                "gain": float(np.mean(gains)),
                "mean_value": float(np.mean(
                    [slot["seeds"][s] for s in sorted(slot["seeds"])]
                )),
            }
        ds_gains = [v["gain"] for v in per_dataset.values()]
        stderr = (
            float(np.std(ds_gains, ddof=1) / np.sqrt(len(ds_gains)))
            if len(ds_gains) > 1
            else 0.0
        )
        out["families"][fam] = {
            "per_dataset": per_dataset,
            "mean_gain": float(np.mean(ds_gains)),
            "stderr_gain": stderr,
            "wins": int(sum(g > 0 for g in ds_gains)),
            "n_datasets": len(ds_gains),
        }

    rank_sums = {f: [] for f in families}
    for ds in datasets:
        fams = sorted(by_ds[ds])
        means = np.array(
            [np.mean([by_ds[ds][f]["seeds"][s]
                      for s in sorted(by_ds[ds][f]["seeds"])])
             for f in fams]
        )
        ranks = rankdata(-means if higher_better else means, method="average")
        out["ranks_per_dataset"][ds] = {
            f: float(r) for f, r in zip(fams, ranks)
        }
        for f, r in zip(fams, ranks):
            rank_sums[f].append(float(r))
    for f in families:
        out["families"][f]["mean_rank"] = float(np.mean(rank_sums[f]))
    return out

"""Feed-forward surrogate of the emissions characteristic function.

Input features, in order: thermal offers, thermal emission intensities,
renewable caps, load caps, coalition indicator.  Hidden layers use rectifiers,
the output layer is linear; inputs and the label are standardized with
training-split statistics stored in the model.  Training is plain minibatch
Adam on mean squared error with an L2 weight penalty and a step learning-rate
schedule, written directly in numpy.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _seeding
from .dcopf import characteristic_emissions
from .grid import GridSystem, OperatingConditions, draw_conditions

__all__ = [
    "TRAIN", "VAL", "TEST",
    "Dataset",
    "TrainConfig",
    "TrainingError",
    "SurrogateModel",
    "SurrogateMetrics",
    "SurrogateEvaluator",
    "feature_matrix",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "init_model",
    "loss_and_grads",
    "train",
    "predict_batch",
    "evaluate_metrics",
    "save_model",
    "load_model",
]

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_FRACTIONS = (0.7, 0.2, 0.1)


@dataclass(frozen=True)
class Layout:
    n_thermal: int
    n_renewable: int
    n_load: int

    @property
    def n_entities(self) -> int:
        return self.n_thermal + self.n_renewable + self.n_load

    @property
    def n_features(self) -> int:
        return 2 * self.n_thermal + self.n_renewable + self.n_load + self.n_entities

    @classmethod
    def of(cls, system: GridSystem) -> "Layout":
        return cls(system.n_thermal, system.n_renewable, system.n_load)


def condition_features(conditions: OperatingConditions, beta_thermal) -> np.ndarray:
    return np.concatenate([conditions.rho_g, beta_thermal, conditions.r_max, conditions.d_max])


def feature_matrix(conditions: OperatingConditions, beta_thermal, coalitions) -> np.ndarray:
    """Rows of ``[offers, betas, renewable caps, load caps, s]``, one per coalition."""
    S = np.asarray(coalitions)
    head = condition_features(conditions, beta_thermal)
    X = np.empty((S.shape[0], head.size + S.shape[1]))
    X[:, :head.size] = head
    X[:, head.size:] = S
    return X


# ---------------------------------------------------------------------------
# datasets

@dataclass(eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    split: np.ndarray
    layout: Layout
    seed: int | None = None
    system_digest: str | None = None

    def __len__(self):
        return self.y.size

    def part(self, which: int):
        sel = self.split == which
        return self.X[sel], self.y[sel]

    @property
    def split_counts(self) -> dict:
        return {name: int(np.sum(self.split == k)) for name, k in (("train", TRAIN), ("val", VAL), ("test", TEST))}


def assign_splits(n: int, seed: int) -> np.ndarray:
    """70/20/10 split by ranking row indices on a seeded hash."""
    keys = np.array([_seeding.hash64(seed, _seeding.TAG_SPLIT, i) for i in range(n)], dtype=np.uint64)
    order = np.argsort(keys, kind="stable")
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    split = np.full(n, TEST, dtype=np.uint8)
    split[order[:n_train]] = TRAIN
    split[order[n_train:n_train + n_val]] = VAL
    return split


def _dataset_rows(system: GridSystem, seed: int, rows: range):
    X, y = [], []
    beta_th = system.beta[system.thermal]
    for i in rows:
        rng = _seeding.stream(seed, _seeding.TAG_DATASET, i)
        t = int(rng.integers(1, 25))
        oc = draw_conditions(system, t, rng)
        s = rng.random(system.n_entities) < 0.5
        X.append(np.concatenate([condition_features(oc, beta_th), s]))
        y.append(characteristic_emissions(system, oc, s))
    return np.array(X).reshape(len(rows), -1), np.array(y)


def _rows_worker(args):
    return _dataset_rows(*args)


def generate_dataset(system: GridSystem, n_samples: int, seed: int, threads: int | None = None) -> Dataset:
    """Label random (conditions, coalition) rows with true OPF emissions.

    Each row draws its own hour of day, operating conditions and a coalition
    uniform over all ``2**n`` subsets from a stream keyed by the row index.
    """
    from .dcopf import resolve_threads

    if n_samples < 10:
        raise ValueError("a dataset needs at least 10 samples")
    workers = resolve_threads(threads)
    if workers == 1:
        X, y = _dataset_rows(system, seed, range(n_samples))
    else:
        from concurrent.futures import ProcessPoolExecutor

        bounds = np.linspace(0, n_samples, workers * 4 + 1).astype(int)
        jobs = [(system, seed, range(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_rows_worker, jobs))
        X = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
    if not np.all(np.isfinite(y)) or np.any(y < -1e-9):
        raise ValueError("dataset labels must be finite and non-negative")
    return Dataset(X=X, y=np.maximum(y, 0.0), split=assign_splits(n_samples, seed), layout=Layout.of(system),
                   seed=seed, system_digest=system.digest())


_DS_MAGIC = b"SSDS"


def save_dataset(ds: Dataset, path) -> None:
    """Binary rows of float32 features followed by the float32 label, plus a JSON sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_DS_MAGIC)
        fh.write(struct.pack("<IQ", ds.X.shape[1], len(ds)))
        rows = np.column_stack([ds.X, ds.y]).astype("<f4")
        fh.write(rows.tobytes())
    meta = {
        "n_features": int(ds.X.shape[1]),
        "n_samples": len(ds),
        "split": ds.split_counts,
        "layout": asdict(ds.layout),
        "seed": ds.seed,
        "system": ds.system_digest,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path, layout: Layout | None = None) -> Dataset:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _DS_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    n_feat, n = struct.unpack("<IQ", data[4:16])
    rows = np.frombuffer(data[16:], dtype="<f4").reshape(n, n_feat + 1).astype(float)
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    if layout is None:
        if "layout" not in meta:
            raise ValueError(f"{path}: layout unknown; pass it or keep the .json sidecar")
        layout = Layout(**meta["layout"])
    seed = meta.get("seed")
    split = assign_splits(n, seed) if seed is not None else assign_splits(n, 0)
    return Dataset(X=rows[:, :n_feat], y=rows[:, n_feat], split=split, layout=layout, seed=seed,
                   system_digest=meta.get("system"))


# ---------------------------------------------------------------------------
# model

class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    hidden: int = 128
    layers: int = 4
    epochs: int = 50
    lr: float = 5e-4
    lr_decay: float = 0.3
    decay_every: int = 5
    weight_decay: float = 1e-4
    batch_size: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        """Eight hidden layers of 512 units."""
        return cls(hidden=512, layers=8, **kw)


@dataclass(eq=False)
class SurrogateModel:
    weights: list
    biases: list
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    layout: Layout
    beta_thermal: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]


def init_model(layout: Layout, hidden: int, layers: int, seed: int, dtype=np.float32,
               beta_thermal=None) -> SurrogateModel:
    """He-initialized network with ``layers`` hidden layers of width ``hidden``.

    The output layer starts at zero, so an untrained model predicts the
    training mean.
    """
    rng = _seeding.stream(seed, _seeding.TAG_TRAIN, 0)
    dims = [layout.n_features] + [hidden] * layers + [1]
    W, b = [], []
    for a, c in zip(dims[:-2], dims[1:-1]):
        W.append((rng.standard_normal((a, c)) * math.sqrt(2.0 / a)).astype(dtype))
        b.append(np.zeros(c, dtype=dtype))
    W.append(np.zeros((dims[-2], 1), dtype=dtype))
    b.append(np.zeros(1, dtype=dtype))
    beta = np.zeros(layout.n_thermal) if beta_thermal is None else np.asarray(beta_thermal, float)
    return SurrogateModel(W, b, np.zeros(layout.n_features, dtype), np.ones(layout.n_features, dtype),
                          0.0, 1.0, layout, beta)


def _forward(weights, biases, Xn):
    acts = [Xn]
    h = Xn
    last = len(weights) - 1
    for k, (W, b) in enumerate(zip(weights, biases)):
        z = h @ W
        z += b
        if k < last:
            np.maximum(z, 0, out=z)
        acts.append(z)
        h = z
    return acts


def loss_and_grads(weights, biases, Xn, yn, weight_decay: float = 0.0):
    """Mean-squared error on normalized data and its gradients by backpropagation.

    ``weight_decay`` adds ``wd/2 * ||theta||^2`` to the loss, matching the
    coupled L2 penalty used during training.
    """
    acts = _forward(weights, biases, Xn)
    out = acts[-1][:, 0]
    err = out - yn
    B = yn.size
    loss = float(err @ err) / B
    gW, gb = [None] * len(weights), [None] * len(weights)
    delta = (2.0 / B) * err[:, None].astype(acts[-1].dtype)
    for k in range(len(weights) - 1, -1, -1):
        gW[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ weights[k].T
            delta *= acts[k] > 0
    if weight_decay:
        loss += 0.5 * weight_decay * sum(float(np.sum(p * p)) for p in list(weights) + list(biases))
        for k in range(len(weights)):
            gW[k] = gW[k] + weight_decay * weights[k]
            gb[k] = gb[k] + weight_decay * biases[k]
    return loss, gW, gb


def _normalizers(X, y):
    x_mean = X.mean(axis=0)
    x_std = X.std(axis=0)
    x_std[x_std < 1e-12] = 1.0
    y_mean = float(y.mean())
    y_std = float(y.std()) or 1.0
    return x_mean, x_std, y_mean, y_std


def train(dataset: Dataset, config: TrainConfig | None = None, beta_thermal=None,
          verbose: bool = False) -> SurrogateModel:
    """Fit a surrogate on the training split; validation loss is tracked per epoch."""
    cfg = config or TrainConfig()
    X_tr, y_tr = dataset.part(TRAIN)
    X_va, y_va = dataset.part(VAL)
    if y_tr.size < 1:
        raise TrainingError("dataset has no training rows")
    if beta_thermal is None:
        beta_thermal = X_tr[0, dataset.layout.n_thermal:2 * dataset.layout.n_thermal]
    model = init_model(dataset.layout, cfg.hidden, cfg.layers, cfg.seed, np.float32, beta_thermal)
    x_mean, x_std, y_mean, y_std = _normalizers(X_tr, y_tr)
    model.x_mean, model.x_std = x_mean.astype(np.float32), x_std.astype(np.float32)
    model.y_mean, model.y_std = float(np.float32(y_mean)), float(np.float32(y_std))
    norm_x = lambda X: ((X - model.x_mean) / model.x_std).astype(np.float32)
    norm_y = lambda y: ((y - model.y_mean) / model.y_std).astype(np.float32)
    Xn, yn = norm_x(X_tr), norm_y(y_tr)
    Xv, yv = norm_x(X_va), norm_y(y_va)

    params = model.params()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    step = 0
    history = []
    rng = _seeding.stream(cfg.seed, _seeding.TAG_TRAIN, 1)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)
        order = rng.permutation(yn.size)
        total = 0.0
        for start in range(0, yn.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, gW, gb = loss_and_grads(model.weights, model.biases, Xn[idx], yn[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"loss became non-finite in epoch {epoch + 1} at step {step + 1}")
            total += loss * idx.size
            step += 1
            grads = [g for pair in zip(gW, gb) for g in pair]
            if cfg.weight_decay:
                grads = [g + cfg.weight_decay * p for g, p in zip(grads, params)]
            c1 = 1 - b1 ** step
            c2 = 1 - b2 ** step
            for p, g, a, v in zip(params, grads, m1, m2):
                a *= b1
                a += (1 - b1) * g
                v *= b2
                v += (1 - b2) * (g * g)
                p -= (lr / c1) * a / (np.sqrt(v / c2) + eps)
        val = _mse(model, Xv, yv) if yv.size else float("nan")
        history.append({"epoch": epoch + 1, "lr": lr, "train_loss": total / yn.size, "val_loss": val})
        if verbose:
            print(f"epoch {epoch + 1:3d}  lr {lr:.2e}  train {total / yn.size:.5f}  val {val:.5f}")
    model.metadata.update(
        config=asdict(cfg),
        history=history,
        system=dataset.system_digest,
        train_rows=int(yn.size),
    )
    return model


def _mse(model, Xn, yn) -> float:
    out = _forward(model.weights, model.biases, Xn)[-1][:, 0]
    return float(np.mean((out - yn) ** 2))


# Inference runs on fixed-shape row blocks so every row goes through the same
# matrix-multiply kernel whatever the batch size; a row predicted alone and
# inside a large batch gives the same bits.
_BLOCK_ROWS = 256


def _predict_features(model: SurrogateModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    out = np.empty(n)
    block = np.zeros((_BLOCK_ROWS, X.shape[1]), dtype=np.float32)
    for start in range(0, n, _BLOCK_ROWS):
        chunk = X[start:start + _BLOCK_ROWS]
        k = chunk.shape[0]
        block[:k] = (chunk - model.x_mean) / model.x_std
        block[k:] = 0
        z = _forward(model.weights, model.biases, block)[-1][:k, 0].astype(float)
        out[start:start + k] = z * model.y_std + model.y_mean
    return np.maximum(out, 0.0)


def predict_batch(model: SurrogateModel, conditions: OperatingConditions, coalitions) -> np.ndarray:
    """Predicted emissions for every coalition row, clamped at zero."""
    S = np.asarray(coalitions)
    if S.ndim != 2 or S.shape[1] != model.layout.n_entities:
        raise ValueError(f"coalitions must have shape (k, {model.layout.n_entities}), got {S.shape}")
    return _predict_features(model, feature_matrix(conditions, model.beta_thermal, S))


class SurrogateEvaluator:
    """Adapter giving a model the ``oracle(conditions, S)`` signature."""

    def __init__(self, model: SurrogateModel):
        self.model = model

    def __call__(self, conditions, S):
        return predict_batch(self.model, conditions, S)


@dataclass
class SurrogateMetrics:
    rmse: float
    mbe: float
    r_squared: float
    conditional_mbe: np.ndarray  # nan where the entity never appears in the split
    n_rows: int

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.conditional_mbe)


def metrics_from_predictions(pred, y, S) -> SurrogateMetrics:
    pred, y = np.asarray(pred, float), np.asarray(y, float)
    S = np.asarray(S).astype(bool)
    err = pred - y
    rmse = float(np.sqrt(np.mean(err ** 2)))
    mbe = float(np.mean(err))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err ** 2)) / ss_tot if ss_tot > 0 else float("nan")
    counts = S.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = (S.T.astype(float) @ err) / counts
    cond[counts == 0] = np.nan
    if np.any(counts == 0):
        warnings.warn(f"entities {np.flatnonzero(counts == 0).tolist()} never appear; conditional MBE undefined")
    assert abs(mbe) <= rmse + 1e-12
    return SurrogateMetrics(rmse=rmse, mbe=mbe, r_squared=r2, conditional_mbe=cond, n_rows=int(y.size))


def evaluate_metrics(model: SurrogateModel, dataset: Dataset, split: int = TEST) -> SurrogateMetrics:
    X, y = dataset.part(split)
    if y.size == 0:
        raise ValueError("split is empty")
    pred = _predict_features(model, X)
    return metrics_from_predictions(pred, y, X[:, -model.layout.n_entities:] > 0.5)


_NN_MAGIC = b"SSNN"
_NN_VERSION = 1


def save_model(model: SurrogateModel, path) -> None:
    """Binary weights file plus a JSON metadata sidecar."""
    path = Path(path)
    dims = model.dims
    with open(path, "wb") as fh:
        fh.write(_NN_MAGIC)
        fh.write(struct.pack("<II", _NN_VERSION, len(model.weights)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for W in model.weights:
            fh.write(np.asarray(W, dtype="<f4").tobytes())
        for b in model.biases:
            fh.write(np.asarray(b, dtype="<f4").tobytes())
        fh.write(np.asarray(model.x_mean, dtype="<f4").tobytes())
        fh.write(np.asarray(model.x_std, dtype="<f4").tobytes())
        fh.write(np.asarray([model.y_mean, model.y_std], dtype="<f4").tobytes())
    meta = dict(model.metadata)
    meta.update(layout=asdict(model.layout), beta_thermal=[float(v) for v in model.beta_thermal],
                adam={"beta1": meta.get("config", {}).get("adam_beta1", 0.9),
                      "beta2": meta.get("config", {}).get("adam_beta2", 0.999),
                      "eps": meta.get("config", {}).get("adam_eps", 1e-8)})
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path) -> SurrogateModel:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _NN_MAGIC:
        raise ValueError(f"{path}: not a surrogate model file")
    version, n_layers = struct.unpack("<II", data[4:12])
    if version != _NN_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = 12
    dims = list(struct.unpack(f"<{n_layers + 1}I", data[off:off + 4 * (n_layers + 1)]))
    off += 4 * (n_layers + 1)

    def take(count):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float32)
        off += 4 * count
        return arr

    W = [take(a * b).reshape(a, b) for a, b in zip(dims[:-1], dims[1:])]
    b = [take(c) for c in dims[1:]]
    x_mean, x_std = take(dims[0]), take(dims[0])
    y_mean, y_std = (float(v) for v in take(2))
    meta = json.loads(Path(str(path) + ".json").read_text())
    layout = Layout(**meta.pop("layout"))
    beta = np.array(meta.pop("beta_thermal"), dtype=float)
    meta.pop("adam", None)
    return SurrogateModel(W, b, x_mean, x_std, y_mean, y_std, layout, beta, meta)

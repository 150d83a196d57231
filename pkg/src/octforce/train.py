"""Adam, the training loop, test metrics and the architecture comparison."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dataset, nets, streams
from .streams import SequenceSet

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    lr: float = 1e-3
    epochs: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scale_labels: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update. Returns new parameter arrays and the new state.

    Parameters without a gradient entry are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    bc1, bc2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, m_new, v_new = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_new[name], v_new[name] = m, v
        upd = config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        new_params[name] = (p - upd).astype(p.dtype)
    return new_params, AdamState(m_new, v_new, t)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainedModel:
    """A model together with the normalisation it was trained under."""

    model: nets.Model
    stats: dataset.Stats
    scale_labels: bool = True

    def predict(self, samples: SequenceSet, batch_size=500) -> np.ndarray:
        """Force estimates in mN."""
        x = streams.normalize(samples, self.stats, self.scale_labels, dtype=self._dtype).windows
        out = np.empty(len(x))
        with ad.no_grad():
            for lo in range(0, len(x), batch_size):
                out[lo : lo + batch_size] = self.model(x[lo : lo + batch_size]).value[:, 0]
        return streams.denormalize_labels(out, self.stats) if self.scale_labels else out

    @property
    def _dtype(self):
        return next(iter(self.model.params.values())).dtype


@dataclass
class History:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_loss, seconds)
    best_epoch: int = -1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
        for e, tr, va, sec in self.rows:
            w.writerow([e, repr(tr), repr(va), f"{sec:.3f}"])
        return buf.getvalue()


def _batched_loss(model, x, y, batch_size):
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(x), batch_size):
            pred = model(x[lo : lo + batch_size])
            total += float(ad.mse_loss(pred, y[lo : lo + batch_size]).value) * len(pred.value)
    return total / len(x)


def train(arch, spec: nets.LayerSpec | None, splits, config: TrainConfig = TrainConfig(), log_every=0):
    """Train on ``splits[0]``, select on ``splits[1]``; a third (test) element is never read.

    Returns ``(TrainedModel, History)`` with the parameters of the epoch with the
    lowest validation loss.
    """
    train_set, val_set = splits[0], splits[1]
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation splits must be non-empty")
    dtype = np.dtype(config.dtype)
    st = dataset.stats(train_set)
    tr = streams.normalize(train_set, st, config.scale_labels, dtype)
    va = streams.normalize(val_set, st, config.scale_labels, dtype)
    ytr = tr.labels.astype(dtype)[:, None]
    yva = va.labels.astype(dtype)[:, None]

    init_ss, shuffle_ss = np.random.SeedSequence(config.seed).spawn(2)
    model = nets.build(arch, spec, d_c=train_set.d_c, seed=init_ss, dtype=dtype)
    rng = np.random.default_rng(shuffle_ss)
    opt = AdamState()
    hist = History()
    best_val, best_state = np.inf, model.state()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(tr))
        running, seen = 0.0, 0
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            idx = np.sort(order[lo : lo + config.batch_size])
            model.zero_grad()
            with ad.Tape() as tape:
                loss = ad.mse_loss(model(tr.windows[idx]), ytr[idx])
            lv = float(loss.value)
            if not np.isfinite(lv):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch {b}")
            ad.backward(loss)
            values = {k: p.value for k, p in model.params.items()}
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            values, opt = adam_step(values, grads, opt, config)
            for k, p in model.params.items():
                p.value = values[k]
            # outputs and tape reference each other; clearing frees the activations now, not at the next GC
            tape.nodes.clear()
            running += lv * len(idx)
            seen += len(idx)
            if log_every and b % log_every == 0:
                log.info("epoch %d batch %d loss %.4g", epoch, b, lv)
        val_loss = _batched_loss(model, va.windows, yva, max(config.batch_size, 500))
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        hist.rows.append((epoch, running / seen, val_loss, time.perf_counter() - t0))
        log.info("epoch %d train %.5g val %.5g (%.1fs)", epoch, running / seen, val_loss, hist.rows[-1][3])
        if val_loss < best_val:
            best_val, best_state, hist.best_epoch = val_loss, model.state(), epoch
    model.load_state(best_state)
    model.zero_grad()
    return TrainedModel(model, st, config.scale_labels), hist


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    mae: float
    mae_std: float
    rmae: float
    rmae_std: float
    cc: float
    note: str = ""

    FIELDS = ("mae", "mae_std", "rmae", "rmae_std", "cc")

    def as_row(self):
        return [getattr(self, f) for f in self.FIELDS]


def compute_metrics(pred, target) -> Metrics:
    """MAE (mN), rMAE = |error| / mean |target| of this set, Pearson CC; stds are population stds."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape or len(pred) == 0:
        raise ValueError(f"need equal, non-empty prediction/target vectors, got {pred.shape} and {target.shape}")
    abs_err = np.abs(pred - target)
    scale = np.mean(np.abs(target))
    rel = abs_err / scale if scale > 0 else np.full_like(abs_err, np.nan)
    note = ""
    if np.std(target) == 0 or np.std(pred) == 0:
        cc, note = float("nan"), "correlation undefined: zero variance in targets or predictions"
    else:
        cc = float(np.corrcoef(pred, target)[0, 1])
    return Metrics(
        float(abs_err.mean()), float(abs_err.std()), float(rel.mean()), float(rel.std()), cc, note
    )


def evaluate(trained: TrainedModel, test: SequenceSet) -> Metrics:
    if len(test) == 0:
        raise ValueError("empty test split")
    return compute_metrics(trained.predict(test), test.labels)


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonReport:
    runs: list = field(default_factory=list)  # (arch, seed, Metrics)

    def archs(self):
        seen = []
        for a, _, _ in self.runs:
            if a not in seen:
                seen.append(a)
        return seen

    def summary(self):
        """Per arch: mean and std over seeds of every metric field."""
        out = {}
        for a in self.archs():
            vals = np.array([m.as_row() for arch, _, m in self.runs if arch == a])
            out[a] = {
                f: (float(vals[:, i].mean()), float(vals[:, i].std())) for i, f in enumerate(Metrics.FIELDS)
            }
        return out

    def ranking(self):
        s = self.summary()
        return sorted(s, key=lambda a: s[a]["mae"][0])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arch", "n_seeds"] + [f"{f}_{k}" for f in Metrics.FIELDS for k in ("mean", "sd")])
        for a, row in self.summary().items():
            n = sum(1 for arch, _, _ in self.runs if arch == a)
            w.writerow([a, n] + [f"{v:.6g}" for f in Metrics.FIELDS for v in row[f]])
        return buf.getvalue()


def compare_models(splits, archs, spec=None, config: TrainConfig = TrainConfig(), n_seeds=3, specs=None):
    """Train every architecture ``n_seeds`` times and evaluate on the test split.

    ``specs`` optionally maps an arch to its own LayerSpec.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    report = ComparisonReport()
    for arch in archs:
        arch = nets.ArchId.parse(arch)
        arch_spec = (specs or {}).get(arch, spec)
        for k in range(n_seeds):
            cfg = TrainConfig(**{**config.__dict__, "seed": config.seed + k})
            trained, _ = train(arch, arch_spec, splits, cfg)
            m = evaluate(trained, splits[2])
            log.info("%s seed %d: mae %.3f cc %.5f", arch.value, cfg.seed, m.mae, m.cc)
            report.runs.append((arch.value, cfg.seed, m))
    return report

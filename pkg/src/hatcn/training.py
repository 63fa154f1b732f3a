"""Training loop, binary metrics and the subject-level cross-validation driver."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset, subject_kfold
from .model import VARIANTS, HatcnConfig, HatcnModel, model_logits, predict_proba

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Optimisation failed (e.g. the loss became non-finite)."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    variant: str = "hatcn"
    depths: tuple[int, ...] = (2,)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def batch_loss(model: HatcnModel, x: np.ndarray, y: np.ndarray, variant: str) -> ad.Tensor:
    return ad.bce_with_logits(model_logits(model, x, variant), y)


def dataset_loss(model: HatcnModel, x: np.ndarray, y: np.ndarray, variant: str, batch_size: int = 64) -> float:
    total = 0.0
    for s in range(0, len(x), batch_size):
        total += batch_loss(model, x[s:s + batch_size], y[s:s + batch_size], variant).value * len(x[s:s + batch_size])
    return float(total / len(x))


@dataclass
class TrainResult:
    model: HatcnModel
    initial_loss: float
    losses: list[float]  # mean mini-batch loss per epoch
    seconds: float


def train(model: HatcnModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> TrainResult:
    """Minimise mean BCE with mini-batch Adam. Deterministic for a fixed ``cfg.seed``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty training set")
    if len(set(y.tolist())) < 2:
        raise ValueError("training set must contain both classes")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters(cfg.variant)
    opt = Adam(params, cfg.lr, cfg.betas, cfg.eps)
    started = time.perf_counter()
    initial = dataset_loss(model, x, y, cfg.variant)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(x), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            opt.zero_grad()
            loss = batch_loss(model, x[idx], y[idx], cfg.variant)
            if not np.isfinite(loss.value):
                raise TrainingError(
                    f"loss became non-finite at epoch {epoch}, batch starting {s} (lr={cfg.lr})"
                )
            loss.backward()
            opt.step()
            total += float(loss.value) * len(idx)
        losses.append(total / len(x))
        if not model.all_finite():
            raise TrainingError(f"parameters became non-finite at epoch {epoch} (lr={cfg.lr})")
        log.debug("epoch %d loss %.5f", epoch, losses[-1])
    return TrainResult(model, initial, losses, time.perf_counter() - started)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    f1_degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def binary_metrics(y_true, y_pred) -> Metrics:
    """Accuracy and F1 with the patient class (1) as positive.

    A zero precision or recall denominator yields F1 = 0 with
    ``f1_degenerate`` set.
    """
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    if y_true.size == 0:
        raise ValueError("cannot score an empty test set")
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    tn = int(np.sum((y_pred == 0) & (y_true == 0)))
    acc = (tp + tn) / y_true.size
    degenerate = (tp + fp) == 0 or (tp + fn) == 0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if degenerate or precision + recall == 0:
        f1 = 0.0
        degenerate = True
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return Metrics(acc, precision, recall, f1, tp, fp, fn, tn, degenerate)


def evaluate(model: HatcnModel, x, y, variant: str = "hatcn", threshold: float = 0.5) -> Metrics:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    prob = predict_proba(model, x, variant)
    return binary_metrics(y, (prob >= threshold).astype(int))


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}


# ---------------------------------------------------------------------------
# cross-validation
#
# Seed splitting rule: the fold partition uses SeedSequence(master, spawn_key=(0,))
# and the run (repeat r, fold f) at depth K uses SeedSequence(master,
# spawn_key=(1, K, r, f)); the first 32-bit word of generate_state seeds both
# weight init and batch shuffling.


def fold_seed(master: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=(0,)).generate_state(1)[0])


def run_seed(master: int, depth: int, repeat: int, fold: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=(1, depth, repeat, fold)).generate_state(1)[0])


@dataclass
class RunRecord:
    depth: int
    repeat: int
    fold: int
    seed: int
    accuracy: float
    f1: float
    f1_degenerate: bool
    final_loss: float
    seconds: float
    train_ids: list[str] = field(repr=False)
    test_ids: list[str] = field(repr=False)
    state: dict | None = field(default=None, repr=False)


def _run_job(job) -> RunRecord:
    (variant, model_cfg, train_cfg, x, y, ids, train_idx, test_idx, depth, repeat, fold, seed, keep) = job
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        model = HatcnModel(model_cfg, seed=seed)
        cfg = TrainConfig(**{**asdict(train_cfg), "seed": seed, "variant": variant})
        result = train(model, x[train_idx], y[train_idx], cfg)
        m = evaluate(model, x[test_idx], y[test_idx], variant)
    return RunRecord(
        depth, repeat, fold, seed, m.accuracy, m.f1, m.f1_degenerate,
        result.losses[-1], result.seconds,
        [ids[i] for i in train_idx], [ids[i] for i in test_idx],
        model.state_dict() if keep else None,
    )


@dataclass
class CVResult:
    variant: str
    master_seed: int
    folds: int
    repeats: int
    model: dict
    train: dict
    runs: list[RunRecord]

    def depth_summary(self) -> dict[int, dict]:
        out = {}
        for depth in sorted({r.depth for r in self.runs}):
            runs = [r for r in self.runs if r.depth == depth]
            out[depth] = {
                "accuracy": summarize([r.accuracy for r in runs]),
                "f1": summarize([r.f1 for r in runs]),
                "seconds": float(sum(r.seconds for r in runs)),
            }
        return out

    def metrics_dict(self) -> dict:
        """Timing-free, fully reproducible view of the result."""
        summary = self.depth_summary()
        return {
            "variant": self.variant,
            "master_seed": self.master_seed,
            "folds": self.folds,
            "repeats": self.repeats,
            "model": self.model,
            "train": self.train,
            "runs": [
                {k: getattr(r, k) for k in ("depth", "repeat", "fold", "seed", "accuracy", "f1", "f1_degenerate", "final_loss")}
                for r in self.runs
            ],
            "summary": {
                str(d): {"accuracy": s["accuracy"], "f1": s["f1"]} for d, s in summary.items()
            },
        }

    def results_dict(self) -> dict:
        out = self.metrics_dict()
        for rec, r in zip(out["runs"], self.runs):
            rec["seconds"] = r.seconds
            rec["train_ids"] = r.train_ids
            rec["test_ids"] = r.test_ids
        for d, s in self.depth_summary().items():
            out["summary"][str(d)]["seconds"] = s["seconds"]
        return out


def cross_validate(
    dataset: Dataset,
    model_cfg: HatcnConfig,
    train_cfg: TrainConfig,
    folds: int = 10,
    repeats: int = 5,
    master_seed: int = 0,
    jobs: int = 1,
    progress=None,
    keep_models: bool = False,
) -> CVResult:
    """Repeated subject-level k-fold CV for every depth in ``train_cfg.depths``.

    Every repeat reuses the same fold partition with fresh weight seeds.
    With ``keep_models`` each run record carries its trained parameters.
    """
    x = dataset.matrix(model_cfg.input_length)
    y = dataset.labels.astype(np.float64)
    ids = dataset.ids
    splits = subject_kfold(dataset, folds, fold_seed(master_seed))
    jobs_list = []
    for depth in train_cfg.depths:
        cfg_k = HatcnConfig(depth, model_cfg.channels, model_cfg.kernel_size, model_cfg.input_length)
        for r in range(repeats):
            for f, (tr, te) in enumerate(splits):
                jobs_list.append((train_cfg.variant, cfg_k, train_cfg, x, y, ids, tr, te,
                                  depth, r, f, run_seed(master_seed, depth, r, f), keep_models))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = []
            for rec in pool.map(_run_job, jobs_list):
                runs.append(rec)
                if progress:
                    progress(rec)
    else:
        runs = []
        for job in jobs_list:
            rec = _run_job(job)
            runs.append(rec)
            if progress:
                progress(rec)
    train_meta = asdict(train_cfg)
    train_meta["betas"] = list(train_meta["betas"])
    train_meta["depths"] = list(train_meta["depths"])
    train_meta.pop("seed")
    return CVResult(
        train_cfg.variant, master_seed, folds, repeats,
        {"channels": model_cfg.channels, "kernel_size": model_cfg.kernel_size, "input_length": model_cfg.input_length},
        train_meta, runs,
    )

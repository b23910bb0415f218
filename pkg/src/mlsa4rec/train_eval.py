"""Loss, optimizer, ranking metrics, training loop, and grid search.

Training minimizes full-vocabulary cross-entropy on next-item targets
with Adam, early-stopping on validation NDCG@10.  Evaluation ranks the
held-out target against every item (id 0 excluded) and averages hit
rate, NDCG, and reciprocal rank at a cutoff.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import Dataset, Split, pad_truncate
from .model import MlsaModel, ModelConfig, build_variant
from .tensor import ParameterStore, Tensor


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 128
    epochs: int = 200
    patience: int = 10
    seed: int = 0
    k: int = 10
    augment: str = "none"          # "none" | "sliding"
    mask_history: bool = False
    n_seeds: int = 1

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.augment not in ("none", "sliding"):
            raise ValueError(f"unknown augment mode {self.augment!r}")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")


@dataclass
class MetricsReport:
    hr_at_k: float
    ndcg_at_k: float
    mrr_at_k: float
    k: int
    population: int


def ce_loss(logits: Tensor, target) -> Tensor:
    """Mean negative log-probability of the target item(s)."""
    return T.cross_entropy(logits, target)


class Adam:
    """Bias-corrected Adam; step() updates in place and zeroes gradients."""

    def __init__(self, store: ParameterStore, lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in store.entries.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.entries.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.store.entries.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.store.zero_grads()


def rank_of_target(scores: np.ndarray, target: int) -> int:
    """1 + count of real items scored strictly above the target.

    Ties resolve in the target's favor; the padding slot 0 never ranks.
    """
    if target < 1:
        raise ValueError("target must be a real item id (>= 1)")
    return 1 + int(np.sum(scores[1:] > scores[target]))


def metrics_at_k(rank: int, k: int = 10) -> tuple[float, float, float]:
    """(hit, ndcg, reciprocal rank) of a single target at cutoff k."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if rank > k:
        return 0.0, 0.0, 0.0
    return 1.0, 1.0 / np.log2(rank + 1.0), 1.0 / rank


def _eval_inputs(split: Split, phase: str) -> tuple[list[list[int]], list[int]]:
    if phase == "valid":
        return split.train, split.valid
    if phase == "test":
        return [tr + [va] for tr, va in zip(split.train, split.valid)], split.test
    raise ValueError(f"unknown phase {phase!r}")


def evaluate(model, split: Split, phase: str = "valid", k: int = 10,
             max_len: int | None = None, mask_history: bool = False,
             batch_size: int = 256) -> MetricsReport:
    """Average HR/NDCG/MRR@k of the held-out target over all users.

    model only needs a score(ids[B, L]) -> [B, vocab] method; order of
    aggregation cannot change the result (sum then divide).
    """
    if max_len is None:
        max_len = model.config.max_len
    histories, targets = _eval_inputs(split, phase)
    n = len(targets)
    hr = ndcg = mrr = 0.0
    for start in range(0, n, batch_size):
        chunk = slice(start, min(start + batch_size, n))
        ids = np.stack([pad_truncate(h, max_len) for h in histories[chunk]])
        scores = np.array(model.score(ids), dtype=np.float64, copy=True)
        for row, (hist, tgt) in enumerate(zip(histories[chunk], targets[chunk])):
            s = scores[row]
            if mask_history:
                seen = [i for i in hist if i != tgt]
                s[seen] = -np.inf
            r = rank_of_target(s, tgt)
            h, nd, mr = metrics_at_k(r, k)
            hr += h
            ndcg += nd
            mrr += mr
    return MetricsReport(hr / n, ndcg / n, mrr / n, k, n)


def build_training_examples(split: Split, max_len: int, augment: str = "none"
                            ) -> tuple[np.ndarray, np.ndarray]:
    """(inputs [M, max_len], targets [M]) from the training sequences.

    Default: one example per user, predicting the newest training item
    from everything before it.  "sliding" adds every prefix -> next
    pair.
    """
    xs, ys = [], []
    for seq in split.train:
        if len(seq) < 2:
            continue
        if augment == "sliding":
            for j in range(1, len(seq)):
                xs.append(pad_truncate(seq[:j], max_len))
                ys.append(seq[j])
        else:
            xs.append(pad_truncate(seq[:-1], max_len))
            ys.append(seq[-1])
    if not xs:
        raise ValueError("no training examples; dataset too small")
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    best_valid: MetricsReport
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def train(model: MlsaModel, dataset: Dataset, split: Split, cfg: TrainConfig,
          log=None) -> TrainResult:
    """Early-stopped Adam training; leaves the model on its best weights."""
    cfg.validate()
    if dataset.user_count == 0:
        raise ValueError("empty dataset")
    xs, ys = build_training_examples(split, model.config.max_len, cfg.augment)
    rng = np.random.default_rng(cfg.seed)
    model.reseed_dropout(cfg.seed)
    opt = Adam(model.params, lr=cfg.lr)
    best = TrainResult({}, MetricsReport(0.0, -1.0, 0.0, cfg.k, 0), -1)
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(ys))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, _ = model.forward(xs[idx], training=True)
            loss = ce_loss(logits, ys[idx])
            model.params.zero_grads()
            loss.backward()
            if model.config.freeze_padding:
                model.embedding.grad[0, :] = 0.0
            opt.step()
            total += loss.item() * len(idx)
        epoch_loss = total / len(ys)
        report = evaluate(model, split, "valid", k=cfg.k,
                          mask_history=cfg.mask_history)
        row = {"phase": "valid", "epoch": epoch, "hr": report.hr_at_k,
               "ndcg": report.ndcg_at_k, "mrr": report.mrr_at_k,
               "loss": epoch_loss, "seed": cfg.seed}
        best.history.append(row)
        if log:
            log(f"epoch {epoch}: loss {epoch_loss:.4f} "
                f"valid ndcg@{cfg.k} {report.ndcg_at_k:.4f}")
        if report.ndcg_at_k > best.best_valid.ndcg_at_k:
            best.best_valid = report
            best.best_epoch = epoch
            best.best_params = model.params.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best.best_params:
        model.params.load_values(best.best_params)
    return best


def train_multi_seed(model_cfg: ModelConfig, dataset: Dataset, split: Split,
                     cfg: TrainConfig, log=None
                     ) -> tuple[MetricsReport, list[MetricsReport], list[dict]]:
    """Independent runs on seeds seed..seed+n_seeds-1; test metrics averaged."""
    reports, rows = [], []
    for s in range(cfg.n_seeds):
        run_cfg = replace(cfg, seed=cfg.seed + s, n_seeds=1)
        model = build_variant(model_cfg, seed=run_cfg.seed)
        result = train(model, dataset, split, run_cfg, log=log)
        rows.extend(result.history)
        rep = evaluate(model, split, "test", k=cfg.k,
                       mask_history=cfg.mask_history)
        rows.append({"phase": "test", "epoch": result.best_epoch,
                     "hr": rep.hr_at_k, "ndcg": rep.ndcg_at_k,
                     "mrr": rep.mrr_at_k, "loss": float("nan"),
                     "seed": run_cfg.seed})
        reports.append(rep)
    mean = MetricsReport(
        float(np.mean([r.hr_at_k for r in reports])),
        float(np.mean([r.ndcg_at_k for r in reports])),
        float(np.mean([r.mrr_at_k for r in reports])),
        cfg.k, reports[0].population)
    return mean, reports, rows


GRID_KEYS = {"batch_size": "train", "n_layers": "model", "dropout": "model",
             "n_heads": "model", "n_interests": "model"}


def grid_search(dataset: Dataset, split: Split, model_cfg: ModelConfig,
                train_cfg: TrainConfig, grid: dict[str, list], log=None
                ) -> tuple[ModelConfig, TrainConfig, list[dict]]:
    """Exhaustive product over the grid, each cell early-stop trained;
    the cell with the best validation NDCG@k wins."""
    if not grid:
        raise ValueError("empty grid")
    for key in grid:
        if key not in GRID_KEYS:
            raise ValueError(f"grid key {key!r} not searchable; "
                             f"allowed: {sorted(GRID_KEYS)}")
    names = sorted(grid)
    rows: list[dict] = []
    best_cell = None
    best_ndcg = -1.0
    for values in itertools.product(*(grid[n] for n in names)):
        cell = dict(zip(names, values))
        m_over = {k: v for k, v in cell.items() if GRID_KEYS[k] == "model"}
        t_over = {k: v for k, v in cell.items() if GRID_KEYS[k] == "train"}
        mc = replace(model_cfg, **m_over)
        tc = replace(train_cfg, **t_over)
        model = build_variant(mc, seed=tc.seed)
        result = train(model, dataset, split, tc, log=log)
        row = dict(cell)
        row.update(ndcg=result.best_valid.ndcg_at_k, hr=result.best_valid.hr_at_k,
                   mrr=result.best_valid.mrr_at_k, epoch=result.best_epoch)
        rows.append(row)
        if log:
            log(f"grid cell {cell}: valid ndcg@{tc.k} "
                f"{result.best_valid.ndcg_at_k:.4f}")
        if result.best_valid.ndcg_at_k > best_ndcg:
            best_ndcg = result.best_valid.ndcg_at_k
            best_cell = (mc, tc)
    return best_cell[0], best_cell[1], rows


def model_grad_check(model_cfg: ModelConfig, ids: np.ndarray,
                     targets: np.ndarray, seed: int = 0,
                     n_samples: int = 200) -> float:
    """Finite-difference check of the full training-loss gradient.

    Builds the model in float64 and compares analytic gradients of the
    cross-entropy loss on (ids, targets) against central differences on
    n_samples randomly chosen parameter coordinates.
    """
    model = build_variant(model_cfg, seed=seed)
    model.cast_float64()

    def loss_fn(_store):
        logits, _ = model.forward(ids, training=False)
        return ce_loss(logits, targets)

    return T.grad_check(loss_fn, model.params, n_samples=n_samples, seed=seed)


def write_metrics_csv(path: str, rows: list[dict], k: int = 10) -> None:
    """Emit history rows with the documented column layout."""
    cols = ["phase", "epoch", f"hr@{k}", f"ndcg@{k}", f"mrr@{k}", "loss", "seed"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r["phase"], r["epoch"], r["hr"], r["ndcg"], r["mrr"],
                        r["loss"], r["seed"]])

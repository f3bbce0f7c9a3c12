"""Rank-weighted model scoring, GA weight tuning and correlation analysis.

Each metric column is turned into normalised ranks in [0, 1] (1 = best). A
model's score is the weighted sum of its ranks with weights on the simplex.
The GA searches weights whose scores best predict matching performance,
measured by Spearman correlation across models.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np
from scipy.stats import rankdata

from .errors import DataError, NumericError

METRICS = ("psnr", "ssim", "epi", "tv", "blind_quality")
HIGHER_IS_BETTER = {"psnr": True, "ssim": True, "epi": True, "tv": True, "blind_quality": False}


@dataclass(frozen=True, eq=False)
class WeightVector:
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        if w.shape != (len(METRICS),):
            raise DataError(f"need {len(METRICS)} weights, got shape {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DataError("weights must be finite and >= 0")
        if abs(w.sum() - 1.0) > 1e-9:
            raise DataError(f"weights must sum to 1, got {w.sum():.12g}")
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls) -> WeightVector:
        return cls(np.full(len(METRICS), 1.0 / len(METRICS)))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(METRICS, map(float, self.w)))


def rank_models(values: np.ndarray, metrics: Sequence[str] = METRICS) -> np.ndarray:
    """Normalised ranks for an (n_models, n_metrics) table; 1 = best, 0 = worst.

    Ties share the mean of their positions.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != len(metrics):
        raise DataError(f"values must be (models, {len(metrics)})")
    n = values.shape[0]
    if n < 2:
        raise DataError("ranking needs at least 2 models")
    if np.any(np.isnan(values)):
        raise DataError("metric table contains missing values")
    ranks = np.empty_like(values)
    for j, name in enumerate(metrics):
        good = values[:, j] if HIGHER_IS_BETTER[name] else -values[:, j]
        ranks[:, j] = (rankdata(good, method="average") - 1.0) / (n - 1)
    return ranks


@dataclass
class ModelScoreTable:
    model_ids: list[str]
    values: np.ndarray  # (n, 5) raw metric values in METRICS order
    mean_recall: np.ndarray | None = None
    mean_precision: np.ndarray | None = None
    extra: dict[str, list] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.model_ids), len(METRICS)):
            raise DataError("metric table shape does not match the model list")
        for name in ("mean_recall", "mean_precision"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float64))

    @property
    def ranks(self) -> np.ndarray:
        return rank_models(self.values)

    def outcome(self, target: str = "mean") -> np.ndarray:
        if self.mean_recall is None or self.mean_precision is None:
            raise DataError("table has no matching outcomes")
        if target == "mean":
            return 0.5 * (self.mean_recall + self.mean_precision)
        if target == "recall":
            return self.mean_recall
        if target == "precision":
            return self.mean_precision
        raise DataError(f"unknown matching target {target!r}")


def score(table: ModelScoreTable | np.ndarray, weights: WeightVector) -> np.ndarray:
    """Per-model score = sum_i rank_i * w_i (ranks may be passed directly)."""
    ranks = table.ranks if isinstance(table, ModelScoreTable) else np.asarray(table, dtype=np.float64)
    if ranks.shape[-1] != weights.w.size:
        raise DataError(f"{ranks.shape[-1]} metric columns but {weights.w.size} weights")
    return ranks @ weights.w


def _id_key(model_id: str):
    try:
        return (0, int(model_id), "")
    except (TypeError, ValueError):
        return (1, 0, str(model_id))


def select_best_model(table: ModelScoreTable, weights: WeightVector) -> str:
    """Highest-scoring model; ties go to the lowest model id."""
    if not table.model_ids:
        raise DataError("empty score table")
    if len(table.model_ids) == 1:
        return table.model_ids[0]
    s = score(table, weights)
    best = s.max()
    tied = [m for m, v in zip(table.model_ids, s) if v == best]
    return min(tied, key=_id_key)


# ------------------------------------------------------------ GA


@dataclass
class GAConfig:
    population: int = 50
    generations: int = 100
    tournament: int = 3
    crossover_rate: float = 0.9
    mutation_scale: float = 0.1
    elitism: int = 2
    seed: int = 0
    target: str = "mean"  # matching outcome: mean of recall/precision, or one alone
    initial: np.ndarray | None = None  # optional (population, 5) starting individuals

    def __post_init__(self):
        if self.population < 4 or self.generations < 1:
            raise DataError("GA needs population >= 4 and generations >= 1")
        if not 0 <= self.elitism < self.population:
            raise DataError("elitism must be in [0, population)")
        if self.tournament < 1 or self.mutation_scale < 0 or not 0 <= self.crossover_rate <= 1:
            raise DataError("invalid GA operator settings")


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation (average ranks for ties); 0 if either side is constant."""
    ra, rb = rankdata(a), rankdata(b)
    ra, rb = ra - ra.mean(), rb - rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    return float(ra @ rb / den) if den > 0 else 0.0


def project_simplex(w: np.ndarray) -> np.ndarray:
    """Clip negatives and rescale to unit sum (uniform if everything vanished)."""
    w = np.maximum(w, 0.0)
    s = w.sum()
    if s <= 0:
        return np.full(w.size, 1.0 / w.size)
    return w if s == 1.0 else w / s


def crossover(p1: np.ndarray, p2: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return project_simplex(p1 + rng.random() * (p2 - p1))


def mutate(w: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet jitter around the current point, then projection to the simplex."""
    if scale == 0:
        return w
    jitter = rng.dirichlet(np.ones(w.size)) - 1.0 / w.size
    return project_simplex(w + scale * jitter)


@dataclass
class GAResult:
    weights: WeightVector
    fitness: float
    best_history: list[float]
    mean_history: list[float]
    best_weights_history: list[np.ndarray]


def ga_tune_weights(table: ModelScoreTable, cfg: GAConfig = GAConfig()) -> GAResult:
    """Evolve metric weights maximising Spearman(score, matching outcome)."""
    if len(table.model_ids) < 5:
        raise DataError("weight tuning needs at least 5 models")
    outcome = table.outcome(cfg.target)
    if np.ptp(outcome) == 0:
        raise NumericError("matching outcome is constant across models; fitness undefined")
    ranks = table.ranks
    k = len(METRICS)
    rng = np.random.default_rng(cfg.seed)
    if cfg.initial is not None:
        pop = np.array(cfg.initial, dtype=np.float64)
        if pop.shape != (cfg.population, k):
            raise DataError(f"initial population must be ({cfg.population}, {k})")
        pop = np.array([project_simplex(p) for p in pop])
    else:
        pop = rng.dirichlet(np.ones(k), size=cfg.population)

    def evaluate(p):
        return np.array([spearman(ranks @ w, outcome) for w in p])

    fit = evaluate(pop)
    best_hist, mean_hist, w_hist = [], [], []

    def record():
        i = int(np.argmax(fit))
        best_hist.append(float(fit[i]))
        mean_hist.append(float(fit.mean()))
        w_hist.append(pop[i].copy())

    record()
    for gen in range(cfg.generations):
        order = np.argsort(-fit, kind="stable")
        children = [pop[i].copy() for i in order[: cfg.elitism]]
        while len(children) < cfg.population:
            sub = np.random.default_rng([cfg.seed, gen, len(children)])

            def pick():
                idx = sub.integers(0, cfg.population, size=cfg.tournament)
                return pop[idx[np.argmax(fit[idx])]]

            a, b = pick(), pick()
            child = crossover(a, b, sub) if sub.random() < cfg.crossover_rate else a.copy()
            children.append(mutate(child, cfg.mutation_scale, sub))
        pop = np.array(children)
        fit = evaluate(pop)
        record()
    i = int(np.argmax(fit))
    return GAResult(WeightVector(pop[i] / pop[i].sum()), float(fit[i]), best_hist, mean_hist, w_hist)


# ------------------------------------------------------------ correlation


def correlation_matrix(columns: Mapping[str, Sequence[float]]) -> tuple[list[str], np.ndarray]:
    """Pearson correlation between named series; exact 1 on the diagonal."""
    names = list(columns)
    data = [np.asarray(columns[n], dtype=np.float64) for n in names]
    lengths = {len(d) for d in data}
    if len(lengths) != 1 or lengths.pop() < 3:
        raise DataError("correlation needs equal-length series with at least 3 values")
    for n, d in zip(names, data):
        if not np.all(np.isfinite(d)):
            raise DataError(f"series {n!r} has non-finite values")
        if np.ptp(d) == 0:
            raise DataError(f"series {n!r} has zero variance")
    m = np.corrcoef(np.stack(data))
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 1.0)
    return names, m


def write_correlation_csv(names: Sequence[str], m: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["", *names])
        for n, row in zip(names, m):
            out.writerow([n, *(f"{v:.10g}" for v in row)])


def write_heatmap_png(m: np.ndarray, path: str | Path, cell: int = 32) -> None:
    """Grayscale heatmap, -1 -> black, +1 -> white, one ``cell``-sized block per entry."""
    g = np.floor((np.clip(m, -1, 1) + 1) / 2 * 255 + 0.5).astype(np.uint8)
    cv2.imwrite(str(path), np.kron(g, np.ones((cell, cell), dtype=np.uint8)))


def write_weights_csv(w: WeightVector, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(list(METRICS))
        out.writerow([f"{v:.10g}" for v in w.w])


def read_weights_csv(path: str | Path) -> WeightVector:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, values = rows[0], [float(v) for v in rows[1]]
    if tuple(header) != METRICS:
        raise DataError(f"weights header must be {','.join(METRICS)}")
    return WeightVector(project_simplex(np.array(values)))


def write_ga_log(result: GAResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["generation", "best_fitness", "mean_fitness", *(f"w_{m}" for m in METRICS)])
        for g, (b, mu, w) in enumerate(zip(result.best_history, result.mean_history, result.best_weights_history)):
            out.writerow([g, f"{b:.10g}", f"{mu:.10g}", *(f"{v:.10g}" for v in w)])


TABLE_COLUMNS = ("model", *METRICS, "mean_recall", "mean_precision")


def write_score_table(table: ModelScoreTable, path: str | Path, weights: WeightVector | None = None) -> None:
    from .metrics import format_value

    ranks = table.ranks if len(table.model_ids) >= 2 else np.zeros_like(table.values)
    scores = score(ranks, weights) if weights is not None else None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        header = list(TABLE_COLUMNS) + [f"rank_{m}" for m in METRICS] + list(table.extra)
        if scores is not None:
            header.append("score")
        out.writerow(header)
        for i, mid in enumerate(table.model_ids):
            row = [mid, *(format_value(v) for v in table.values[i])]
            row += [format_value(None if table.mean_recall is None else table.mean_recall[i]),
                    format_value(None if table.mean_precision is None else table.mean_precision[i])]
            row += [format_value(v) for v in ranks[i]]
            row += [table.extra[k][i] for k in table.extra]
            if scores is not None:
                row.append(format_value(scores[i]))
            out.writerow(row)


def read_score_table(path: str | Path) -> ModelScoreTable:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path} has no model rows")
    missing = [c for c in TABLE_COLUMNS[:6] if c not in rows[0]]
    if missing:
        raise DataError(f"{path} lacks columns {missing}")

    def num(v):
        if v is None or v == "":
            return float("nan")
        return float(v)

    values = np.array([[num(r[m]) for m in METRICS] for r in rows])
    rec = prec = None
    if "mean_recall" in rows[0] and all(r["mean_recall"] != "" for r in rows):
        rec = np.array([num(r["mean_recall"]) for r in rows])
        prec = np.array([num(r["mean_precision"]) for r in rows])
    return ModelScoreTable([r["model"] for r in rows], values, rec, prec)

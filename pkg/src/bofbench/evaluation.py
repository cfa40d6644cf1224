"""Rank-bounded retrieval metrics (precision at 5, average precision) and a chance baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

P_AT = 5
DEFAULT_CHANCE_TRIALS = 1000


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    values: np.ndarray
    item_ids: tuple

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        ids = tuple(str(i) for i in self.item_ids)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] != len(ids):
            raise ValueError(f"distance matrix shape {v.shape} does not match {len(ids)} item ids")
        if len(set(ids)) != len(ids):
            raise ValueError("item ids must be unique")
        if not np.all(np.isfinite(v)):
            raise ValueError("distance matrix has non-finite entries")
        if np.any(np.abs(v - v.T) > 1e-9):
            raise ValueError("distance matrix is not symmetric")
        if np.any(v < 0):
            raise ValueError("distance matrix has negative entries")
        if np.any(np.diag(v) != 0):
            raise ValueError("distance matrix diagonal must be zero")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "item_ids", ids)

    def __len__(self):
        return len(self.item_ids)

    @classmethod
    def from_pairwise(cls, values, item_ids, clip_negative: bool = True) -> DistanceMatrix:
        """Build from raw divergence estimates: symmetrize exactly, zero the diagonal, clip noise below 0."""
        v = np.array(values, dtype=np.float64)
        v = 0.5 * (v + v.T)
        np.fill_diagonal(v, 0.0)
        if clip_negative:
            v = np.maximum(v, 0.0)
        return cls(v, tuple(item_ids))

    def save(self, path) -> None:
        np.savez(path, values=self.values, item_ids=np.array(self.item_ids, dtype=str))

    @classmethod
    def load(cls, path) -> DistanceMatrix:
        with np.load(path, allow_pickle=False) as z:
            return cls(z["values"], tuple(str(s) for s in z["item_ids"]))


def _encode_labels(labels: Sequence) -> np.ndarray:
    _, codes = np.unique(np.asarray([str(l) for l in labels]), return_inverse=True)
    return codes


def _id_rank(item_ids: Sequence[str]) -> np.ndarray:
    order = sorted(range(len(item_ids)), key=lambda i: item_ids[i])
    rank = np.empty(len(item_ids), dtype=np.int64)
    rank[order] = np.arange(len(item_ids))
    return rank


def _ranked_neighbours(values: np.ndarray, id_rank: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """For each seed in ``rows``: the other items by ascending distance, ties by item id."""
    n = values.shape[0]
    d = values[rows].copy()
    d[np.arange(len(rows)), rows] = -np.inf
    tiebreak = np.broadcast_to(id_rank, d.shape)
    order = np.lexsort((tiebreak, d), axis=-1)
    return order[:, 1:] if n > 1 else order[:, :0]


def _seed_metrics(order: np.ndarray, codes: np.ndarray, rows: np.ndarray, k_max: int = P_AT):
    """Per-seed (p@k, AP) in percent for ranked neighbour lists."""
    counts = np.bincount(codes)
    relevant = counts[codes[rows]] - 1
    if np.any(relevant < 1):
        bad = rows[relevant < 1]
        raise ValueError(f"seed items {bad.tolist()} belong to singleton classes")
    rel = (codes[order] == codes[rows][:, None]).astype(np.float64)
    hits = np.cumsum(rel, axis=1)
    k = np.minimum(k_max, relevant)
    p_at_k = 100.0 * hits[np.arange(len(rows)), k - 1] / k
    ranks = np.arange(1, order.shape[1] + 1, dtype=np.float64)
    prec = np.where(rel > 0, hits / ranks, 0.0)
    # sequential accumulation keeps AP reproducible bit for bit
    ap = 100.0 * np.cumsum(prec, axis=1)[:, -1] / relevant
    return p_at_k, ap


def _all_seed_metrics(values: np.ndarray, codes: np.ndarray, id_rank: np.ndarray):
    rows = np.arange(values.shape[0])
    return _seed_metrics(_ranked_neighbours(values, id_rank, rows), codes, rows)


def _single(dm: DistanceMatrix, labels, seed_index: int):
    if len(labels) != len(dm):
        raise ValueError("one label per item is required")
    rows = np.array([seed_index])
    order = _ranked_neighbours(dm.values, _id_rank(dm.item_ids), rows)
    return _seed_metrics(order, _encode_labels(labels), rows)


def precision_at_5(dm: DistanceMatrix, labels, seed_index: int) -> float:
    """Percent of same-class items among the k nearest, k = min(5, class size - 1)."""
    return float(_single(dm, labels, seed_index)[0][0])


def average_precision(dm: DistanceMatrix, labels, seed_index: int) -> float:
    """Mean of the precision at the rank of each same-class item, in percent."""
    return float(_single(dm, labels, seed_index)[1][0])


@dataclass(frozen=True)
class ChanceEstimate:
    p5_mean: float
    p5_std: float
    map_mean: float
    map_std: float
    p5_trial_std: float
    map_trial_std: float
    trials: int

    def __iter__(self):
        # unpacks as ((p5_mean, p5_std), (map_mean, map_std))
        yield (self.p5_mean, self.p5_std)
        yield (self.map_mean, self.map_std)


def chance_baseline(labels, trials: int = DEFAULT_CHANCE_TRIALS, rng_seed: int = 0) -> ChanceEstimate:
    """Metrics of random retrieval: i.i.d. uniform symmetric distance matrices.

    Per-seed values are pooled over trials for the mean and std; the spread
    of the per-trial means is reported separately as ``*_trial_std``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    codes = _encode_labels(labels)
    n = len(codes)
    rng = np.random.default_rng(rng_seed)
    id_rank = np.arange(n)
    iu = np.triu_indices(n, 1)
    p5 = np.empty((trials, n))
    ap = np.empty((trials, n))
    for t in range(trials):
        m = np.zeros((n, n))
        m[iu] = rng.random(len(iu[0]))
        m = m + m.T
        p5[t], ap[t] = _all_seed_metrics(m, codes, id_rank)
    return ChanceEstimate(
        p5_mean=float(p5.mean()),
        p5_std=float(p5.std()),
        map_mean=float(ap.mean()),
        map_std=float(ap.std()),
        p5_trial_std=float(p5.mean(axis=1).std()),
        map_trial_std=float(ap.mean(axis=1).std()),
        trials=trials,
    )


@dataclass(eq=False)
class EvalReport:
    item_ids: tuple
    labels: tuple
    p5: np.ndarray
    ap: np.ndarray
    chance: ChanceEstimate | None = None
    config: dict = field(default_factory=dict)

    @property
    def p5_mean(self) -> float:
        return float(np.mean(self.p5))

    @property
    def p5_std(self) -> float:
        return float(np.std(self.p5))

    @property
    def map_mean(self) -> float:
        return float(np.mean(self.ap))

    @property
    def map_std(self) -> float:
        return float(np.std(self.ap))

    def to_dict(self) -> dict:
        out = {
            "config": self.config,
            "n_items": len(self.item_ids),
            "p5": {"mean": self.p5_mean, "std": self.p5_std},
            "map": {"mean": self.map_mean, "std": self.map_std},
            "chance": None,
            "per_seed": [
                {"item_id": i, "label": l, "p5": float(p), "ap": float(a)}
                for i, l, p, a in zip(self.item_ids, self.labels, self.p5, self.ap)
            ],
        }
        if self.chance is not None:
            c = self.chance
            out["chance"] = {
                "trials": c.trials,
                "p5": {"mean": c.p5_mean, "std": c.p5_std, "trial_std": c.p5_trial_std},
                "map": {"mean": c.map_mean, "std": c.map_std, "trial_std": c.map_trial_std},
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> EvalReport:
        seeds = data["per_seed"]
        chance = None
        if data.get("chance"):
            c = data["chance"]
            chance = ChanceEstimate(
                c["p5"]["mean"], c["p5"]["std"], c["map"]["mean"], c["map"]["std"],
                c["p5"]["trial_std"], c["map"]["trial_std"], c["trials"],
            )
        return cls(
            item_ids=tuple(s["item_id"] for s in seeds),
            labels=tuple(s["label"] for s in seeds),
            p5=np.array([s["p5"] for s in seeds], dtype=np.float64),
            ap=np.array([s["ap"] for s in seeds], dtype=np.float64),
            chance=chance,
            config=data.get("config", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls.from_dict(json.loads(text))


def evaluate(dm: DistanceMatrix, labels, chance_trials: int = 0, rng_seed: int = 0, config: dict | None = None) -> EvalReport:
    """Per-seed p@5 and AP for every item; optionally attach a chance estimate."""
    labels = tuple(str(l) for l in labels)
    if len(labels) != len(dm):
        raise ValueError(f"{len(labels)} labels for {len(dm)} items")
    codes = _encode_labels(labels)
    p5, ap = _all_seed_metrics(dm.values, codes, _id_rank(dm.item_ids))
    chance = chance_baseline(labels, chance_trials, rng_seed) if chance_trials else None
    return EvalReport(dm.item_ids, labels, p5, ap, chance, dict(config or {}))


def _cell(mean: float, std: float) -> str:
    return f"{mean:.0f}±{std:.0f}"


def format_table(rows: Sequence[tuple[str, dict[str, EvalReport]]], columns: Sequence[str] | None = None) -> str:
    """Aligned text table with one row per dataset: chance, then one P@5 / MAP column per method."""
    if columns is None:
        columns = []
        for _, reports in rows:
            columns.extend(c for c in reports if c not in columns)
    header = ["dataBase", "chance", *columns]
    lines = [header]
    for name, reports in rows:
        chance = next((r.chance for r in reports.values() if r.chance is not None), None)
        cells = [name, "-" if chance is None else
                 f"{_cell(chance.p5_mean, chance.p5_std)} / {_cell(chance.map_mean, chance.map_std)}"]
        for col in columns:
            r = reports.get(col)
            cells.append("-" if r is None else f"{_cell(r.p5_mean, r.p5_std)} / {_cell(r.map_mean, r.map_std)}")
        lines.append(cells)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    out = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in lines]
    out.insert(1, "-" * len(out[0]))
    return "\n".join(out) + "\n"

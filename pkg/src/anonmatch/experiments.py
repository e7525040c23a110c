"""Monte Carlo sweeps over the (m exponent, noise exponent) plane."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ._random import STREAM_BOOTSTRAP, STREAM_TRIAL, derive_rng, derive_seed
from .adversary import AttackConfig, match_iid, match_markov
from .mechanisms import (
    NoiseSchedule,
    ObservationSchedule,
    anonymize,
    draw_noise_levels,
    obfuscate,
    random_permutation,
)
from .privacy_metrics import joint_counts, plugin_mi_from_counts
from .source_models import (
    THREE_STATE_TOPOLOGY,
    DensityConfig,
    Topology,
    generate_traces,
    sample_iid_profiles,
    sample_markov_profiles,
)

MODELS = ("iid-2", "iid-r", "markov")
DEFAULT_BUDGET = 2e9
DEFAULT_ALPHA = 0.2
SUCCESS_THRESHOLD = 0.9
MI_THRESHOLD = 0.05
CHANCE_SIGMAS = 3.0
BOOTSTRAP_REPS = 200
THREADS_ENV = "ANONMATCH_THREADS"

CSV_COLUMNS = (
    "model",
    "r_or_d",
    "n",
    "eta",
    "gamma",
    "c",
    "c_prime",
    "trials",
    "seed",
    "success_rate",
    "ambiguity_rate",
    "pe",
    "mi_lb",
    "mi_se",
)


class BudgetError(RuntimeError):
    """A cell would draw more samples than the configured budget."""

    def __init__(self, needed: float, budget: float, where: str = ""):
        self.needed = needed
        self.budget = budget
        super().__init__(f"{where}needs {needed:.3g} symbol draws, budget is {budget:.3g}")


@dataclass
class SweepGrid:
    n_values: list[int]
    eta_values: list[float]
    gamma_values: list[float]
    c: float = 1.0
    c_prime: float = 1.0
    model: str = "iid-2"
    r: int = 2
    topology: Topology | None = None
    trials: int = 100
    seed: int = 0
    alpha: float | None = None
    budget: float = DEFAULT_BUDGET
    center: str = "noise-range"
    density: DensityConfig | None = None

    def __post_init__(self):
        for name in ("n_values", "eta_values", "gamma_values"):
            vals = list(getattr(self, name))
            if not vals:
                raise ValueError(f"{name} must be nonempty")
            setattr(self, name, vals)
        self.n_values = [int(n) for n in self.n_values]
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.model == "iid-2":
            self.r = 2
        if self.model == "markov":
            self.topology = self.topology or THREE_STATE_TOPOLOGY
            self.topology.validate()
            self.r = self.topology.r
        elif self.r < 2:
            raise ValueError("r must be >= 2")

    @property
    def dim(self) -> int:
        return self.topology.free_dim if self.model == "markov" else self.r - 1

    @property
    def r_or_d(self) -> int:
        return self.topology.free_dim if self.model == "markov" else self.r

    def cell(self, n: int, eta: float, gamma: float) -> "CellConfig":
        return CellConfig(self, int(n), float(eta), float(gamma))

    def cells(self) -> list["CellConfig"]:
        return [self.cell(n, e, g) for e in self.eta_values for g in self.gamma_values for n in self.n_values]

    def to_record(self) -> dict:
        rec = {k: getattr(self, k) for k in ("n_values", "eta_values", "gamma_values", "c", "c_prime", "model", "r", "trials", "seed", "alpha", "budget", "center")}
        if self.model == "markov":
            rec["topology"] = {"r": self.topology.r, "edges": [list(e) for e in self.topology.edges]}
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "SweepGrid":
        rec = dict(rec)
        topo = rec.pop("topology", None)
        if topo is not None:
            rec["topology"] = Topology.from_edges(topo["edges"], r=topo.get("r"))
        return cls(**rec)


@dataclass(frozen=True)
class CellConfig:
    grid: SweepGrid
    n: int
    eta: float
    gamma: float

    @property
    def m(self) -> int:
        return ObservationSchedule(self.grid.c, self.eta).m(self.n)

    @property
    def noise(self) -> NoiseSchedule:
        return NoiseSchedule(self.grid.c_prime, self.gamma)

    @property
    def alpha(self) -> float:
        """Band exponent: ``eta - 2/dim`` when positive, else a fixed default."""
        if self.grid.alpha is not None:
            return self.grid.alpha
        a = self.eta - 2.0 / self.grid.dim
        return a if a > 1e-9 else DEFAULT_ALPHA

    def draws(self) -> float:
        return float(self.m) * self.n * self.grid.trials


@dataclass
class CellResult:
    model: str
    r_or_d: int
    n: int
    eta: float
    gamma: float
    c: float
    c_prime: float
    trials: int
    seed: int
    success_rate: float
    ambiguity_rate: float
    pe: float
    mi_lb: float
    mi_se: float
    strict_success_rate: float = field(default=float("nan"), compare=False)

    def row(self) -> list[str]:
        out = []
        for k in CSV_COLUMNS:
            v = getattr(self, k)
            out.append(repr(float(v)) if isinstance(v, float) else str(v))
        return out

    @classmethod
    def from_row(cls, row: dict) -> "CellResult":
        kw = {}
        for f in fields(cls):
            if f.name not in row:
                continue
            kw[f.name] = str(row[f.name]) if f.name == "model" else (int(row[f.name]) if f.name in ("r_or_d", "n", "trials", "seed") else float(row[f.name]))
        return cls(**kw)


@dataclass
class _Trial:
    success: bool
    strict: bool
    ambiguous: bool
    errors: int
    m: int
    counts: np.ndarray


def _run_trial(cfg: CellConfig, t: int) -> _Trial:
    g = cfg.grid
    n, m = cfg.n, cfg.m
    ts = derive_seed(g.seed, STREAM_TRIAL, t)
    if g.model == "markov":
        pop = sample_markov_profiles(n, g.topology, g.density, seed=ts)
    else:
        pop = sample_iid_profiles(n, g.r, g.density, seed=ts)
    x = generate_traces(pop, m, seed=ts)
    draw = draw_noise_levels(n, cfg.noise, seed=ts)
    z = obfuscate(x, draw, g.r, seed=ts)
    perm = random_permutation(n, seed=ts)
    y = anonymize(z, perm)
    acfg = AttackConfig(cfg.alpha, pop, draw.a_n, 0, g.center)
    rep = match_markov(y, acfg) if g.model == "markov" else match_iid(y, acfg)
    truth = int(perm.forward[0])
    x0 = x.values[:, 0]
    est = rep.sample_estimates
    return _Trial(
        success=rep.claimed_pseudonym == truth,
        strict=rep.band_claim == truth,
        ambiguous=rep.ambiguous,
        errors=int(np.count_nonzero(x0 != est)),
        m=m,
        counts=joint_counts(x0, est, g.r),
    )


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def run_phase_cell(cfg: CellConfig) -> CellResult:
    """Run ``trials`` independent end-to-end trials of one (n, eta, gamma) cell.

    Every trial draws a fresh population, traces, noise and permutation from
    its own seed stream, attacks user 0 and scores the claim. ``pe`` averages
    the symbol error over all times; ``mi_lb`` is the plug-in MI of
    (true symbol, estimate) pooled over times and trials, with a standard error
    from a bootstrap over trials.
    """
    g = cfg.grid
    if cfg.draws() > g.budget:
        raise BudgetError(cfg.draws(), g.budget, f"cell n={cfg.n} eta={cfg.eta} gamma={cfg.gamma} ")
    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            res = list(ex.map(lambda t: _run_trial(cfg, t), range(g.trials)))
    else:
        res = [_run_trial(cfg, t) for t in range(g.trials)]
    T = len(res)
    counts = np.stack([r.counts for r in res])
    mi = plugin_mi_from_counts(counts.sum(axis=0)).value_bits
    if T > 1:
        rng = derive_rng(g.seed, STREAM_BOOTSTRAP, cfg.n)
        boot = [plugin_mi_from_counts(counts[rng.integers(0, T, T)].sum(axis=0)).value_bits for _ in range(BOOTSTRAP_REPS)]
        mi_se = float(np.std(boot, ddof=1))
    else:
        mi_se = float("nan")
    return CellResult(
        model=g.model,
        r_or_d=g.r_or_d,
        n=cfg.n,
        eta=cfg.eta,
        gamma=cfg.gamma,
        c=float(g.c),
        c_prime=float(g.c_prime),
        trials=T,
        seed=int(g.seed),
        success_rate=float(np.mean([r.success for r in res])),
        ambiguity_rate=float(np.mean([r.ambiguous for r in res])),
        pe=float(sum(r.errors for r in res) / sum(r.m for r in res)),
        mi_lb=float(mi),
        mi_se=mi_se,
        strict_success_rate=float(np.mean([r.strict for r in res])),
    )


# ---------------------------------------------------------------------------
# Sweeps and classification
# ---------------------------------------------------------------------------


def classify(cells: Sequence[CellResult]) -> str:
    """Label one (eta, gamma) column of cells from its trend over n.

    ``no-privacy-trend``: success at the largest n beats the smallest n and
    exceeds 0.9. ``privacy-trend``: at every n success is within three
    binomial standard errors of the chance level ``1/n`` and ``mi_lb`` is
    below 0.05 bits. Otherwise ``inconclusive``.
    """
    cells = sorted(cells, key=lambda c: c.n)
    if not cells:
        raise ValueError("no cells to classify")
    first, last = cells[0], cells[-1]
    if last.success_rate > SUCCESS_THRESHOLD and (len(cells) == 1 or last.success_rate > first.success_rate):
        return "no-privacy-trend"
    chance = all(
        abs(c.success_rate - 1.0 / c.n) <= CHANCE_SIGMAS * math.sqrt((1.0 / c.n) * (1 - 1.0 / c.n) / c.trials)
        for c in cells
    )
    if chance and all(c.mi_lb < MI_THRESHOLD for c in cells):
        return "privacy-trend"
    return "inconclusive"


def classify_cells(cells: Sequence[CellResult]) -> dict[tuple[float, float], str]:
    groups: dict[tuple[float, float], list[CellResult]] = {}
    for c in cells:
        groups.setdefault((c.eta, c.gamma), []).append(c)
    return {k: classify(v) for k, v in groups.items()}


@dataclass
class PhaseDiagram:
    cells: list[CellResult]
    classification: dict[tuple[float, float], str]
    errors: list[dict] = field(default_factory=list)
    grid: SweepGrid | None = None
    wall_time: float = field(default=0.0, compare=False)

    def to_record(self) -> dict:
        return {
            "grid": self.grid.to_record() if self.grid else None,
            "cells": [asdict(c) for c in self.cells],
            "classification": [{"eta": e, "gamma": g, "label": lab} for (e, g), lab in self.classification.items()],
            "errors": self.errors,
            "thresholds": {"success": SUCCESS_THRESHOLD, "mi_bits": MI_THRESHOLD, "chance_sigmas": CHANCE_SIGMAS},
        }


def run_phase_sweep(grid: SweepGrid) -> PhaseDiagram:
    """Evaluate every cell of ``grid`` and classify each (eta, gamma) column.

    Cells over budget are recorded in ``errors`` and skipped.
    """
    start = time.perf_counter()
    cells, errors = [], []
    for cfg in grid.cells():
        try:
            cells.append(run_phase_cell(cfg))
        except BudgetError as e:
            errors.append({"n": cfg.n, "eta": cfg.eta, "gamma": cfg.gamma, "needed": e.needed, "budget": e.budget})
    return PhaseDiagram(cells, classify_cells(cells), errors, grid, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def _cells_of(result) -> list[CellResult]:
    if isinstance(result, PhaseDiagram):
        return result.cells
    if isinstance(result, CellResult):
        return [result]
    return list(result)


def export(result, path: str | Path, format: str = "csv", meta: bool = True) -> None:
    """Write cells as CSV (fixed column order) or as a JSON record.

    A ``<path>.meta.json`` sidecar records seed, version, budget and wall time
    unless ``meta`` is false.
    """
    from . import __version__

    path = Path(path)
    cells = _cells_of(result)
    try:
        if format == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_COLUMNS)
                for c in cells:
                    w.writerow(c.row())
        elif format in ("record", "structured-record"):
            rec = result.to_record() if isinstance(result, PhaseDiagram) else {"cells": [asdict(c) for c in cells]}
            path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
        else:
            raise ValueError(f"unknown format {format!r}")
        if meta:
            grid = result.grid if isinstance(result, PhaseDiagram) else None
            side = {
                "version": __version__,
                "seed": cells[0].seed if cells else None,
                "budget": grid.budget if grid else DEFAULT_BUDGET,
                "wall_time_s": result.wall_time if isinstance(result, PhaseDiagram) else None,
                "thresholds": {"success": SUCCESS_THRESHOLD, "mi_bits": MI_THRESHOLD, "chance_sigmas": CHANCE_SIGMAS},
            }
            Path(str(path) + ".meta.json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


def import_csv(path: str | Path) -> list[CellResult]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [CellResult.from_row(row) for row in reader]


# ---------------------------------------------------------------------------
# Estimator diagnostics
# ---------------------------------------------------------------------------


def odd_transition_error_correlation(cfg: CellConfig, stride: int = 2) -> float:
    """Lag-1 correlation of corruption indicators between consecutive used transitions.

    Pooled over users and trials of a Markov cell, centered per user.
    ``stride=2`` is the odd-transition scheme; ``stride=1`` uses overlapping
    transitions for contrast.
    """
    from .adversary import transition_error_correlation

    g = cfg.grid
    num = den = 0.0
    for t in range(g.trials):
        ts = derive_seed(g.seed, STREAM_TRIAL, t)
        if g.model == "markov":
            pop = sample_markov_profiles(cfg.n, g.topology, g.density, seed=ts)
        else:
            pop = sample_iid_profiles(cfg.n, g.r, g.density, seed=ts)
        x = generate_traces(pop, cfg.m, seed=ts)
        draw = draw_noise_levels(cfg.n, cfg.noise, seed=ts)
        z = obfuscate(x, draw, g.r, seed=ts)
        a, b = transition_error_correlation(x, z, stride, parts=True)
        num += a
        den += b
    return num / den if den > 0 else float("nan")

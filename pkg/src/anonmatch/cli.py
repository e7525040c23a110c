"""Command-line entry point: ``anonmatch {generate,attack,sweep,mi,verify}``.

Exit codes: 0 success, 2 config error, 3 budget error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from .adversary import AttackConfig, match_iid, match_markov
from .experiments import SweepGrid, export, run_phase_sweep
from .mechanisms import NoiseSchedule, ObservationSchedule, anonymize, draw_noise_levels, obfuscate, random_permutation
from .privacy_metrics import exact_mi_small, plugin_mi_lower_bound
from .source_models import (
    DensityConfig,
    Topology,
    generate_traces,
    load_population,
    read_traces_csv,
    load_traces_npz,
    sample_iid_profiles,
    sample_markov_profiles,
    save_population,
    save_traces_npz,
    write_traces_csv,
)
from . import theory_oracles as oracles

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_VERIFY = 0, 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        self.key = key
        super().__init__(f"config error at '{key}': {msg}")


_MISSING = object()


def _get(cfg: dict, key: str, kind=None, default: Any = _MISSING, prefix: str = "") -> Any:
    path = f"{prefix}{key}"
    if key not in cfg:
        if default is _MISSING:
            raise ConfigError(path, "required key missing")
        return default
    v = cfg[key]
    if kind is None:
        return v
    try:
        if kind is list:
            if not isinstance(v, list) or not v:
                raise ConfigError(path, "must be a nonempty list")
            return v
        if kind is int and (isinstance(v, bool) or float(v) != int(v)):
            raise ConfigError(path, f"expected an integer, got {v!r}")
        return kind(v)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(path, f"expected {kind.__name__}, got {v!r}") from None


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError("<file>", f"cannot read {path}: {e.strerror}") from None
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError("<file>", f"cannot parse {path}: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "top level must be a mapping")
    return data


def _noise(cfg: dict, prefix: str) -> NoiseSchedule | float:
    if "a_n" in cfg:
        return _get(cfg, "a_n", float, prefix=prefix)
    sub = _get(cfg, "noise", dict, prefix=prefix)
    return NoiseSchedule(_get(sub, "c_prime", float, 1.0, prefix + "noise."), _get(sub, "gamma", float, prefix=prefix + "noise."))


def _observations(cfg: dict, prefix: str) -> ObservationSchedule | int:
    if "m" in cfg:
        return _get(cfg, "m", int, prefix=prefix)
    sub = _get(cfg, "observations", dict, prefix=prefix)
    return ObservationSchedule(_get(sub, "c", float, 1.0, prefix + "observations."), _get(sub, "eta", float, prefix=prefix + "observations."))


def _topology(cfg: dict, prefix: str) -> Topology:
    sub = _get(cfg, "topology", dict, prefix=prefix)
    edges = _get(sub, "edges", list, prefix=prefix + "topology.")
    return Topology.from_edges(edges, r=sub.get("r"))


def _write_json(path: Path, rec: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rec, indent=2, sort_keys=True, default=float) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: dict, args) -> int:
    model = _get(cfg, "model", str, "iid-2")
    n = _get(cfg, "n", int)
    if n < 1:
        raise ConfigError("n", "must be >= 1")
    obs = _observations(cfg, "")
    m = obs.m(n) if isinstance(obs, ObservationSchedule) else obs
    seed = args.seed
    density = DensityConfig()
    try:
        if model == "markov":
            pop = sample_markov_profiles(n, _topology(cfg, ""), density, seed=seed)
        elif model in ("iid-2", "iid-r"):
            pop = sample_iid_profiles(n, 2 if model == "iid-2" else _get(cfg, "r", int), density, seed=seed)
        else:
            raise ConfigError("model", f"unknown model {model!r}")
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError("model", str(e)) from None
    out = Path(args.out or "generated")
    out.mkdir(parents=True, exist_ok=True)
    x = generate_traces(pop, m, seed=seed)
    save_population(pop, out / "population.json")
    stages = {"x": x}
    meta = {"seed": seed, "n": n, "m": m, "model": model, "version": __version__}
    if "noise" in cfg or "a_n" in cfg:
        draw = draw_noise_levels(n, _noise(cfg, ""), seed=seed)
        z = obfuscate(x, draw, pop.r, seed=seed)
        perm = random_permutation(n, seed=seed)
        stages["z"] = z
        stages["y"] = anonymize(z, perm)
        meta["noise"] = draw.to_record()
        meta["permutation"] = perm.forward.tolist()
    for name, tr in stages.items():
        if args.format == "record":
            save_traces_npz(tr, out / f"{name}.npz")
        else:
            write_traces_csv(tr, out / f"{name}.csv")
    _write_json(out / "run.json", meta)
    if not args.quiet:
        print(f"wrote {', '.join(stages)} traces for n={n}, m={m} to {out} (seed {seed})")
    return EXIT_OK


def _read_traces(path: str, stage: str, r: int | None):
    p = Path(path)
    if not p.exists():
        raise ConfigError("traces", f"file not found: {path}")
    return load_traces_npz(p) if p.suffix == ".npz" else read_traces_csv(p, stage=stage, r=r)


def cmd_attack(cfg: dict, args) -> int:
    pop_path = Path(_get(cfg, "population", str))
    if not pop_path.exists():
        raise ConfigError("population", f"file not found: {pop_path}")
    pop = load_population(pop_path)
    y = _read_traces(_get(cfg, "traces", str), _get(cfg, "stage", str, "Y"), pop.r)
    try:
        acfg = AttackConfig(
            alpha=_get(cfg, "alpha", float, 0.2),
            known_profiles=pop,
            a_n=_get(cfg, "a_n", float, 0.0),
            target_user=_get(cfg, "target_user", int, 0),
            center=_get(cfg, "center", str, "noise-range"),
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError("attack", str(e)) from None
    rep = match_markov(y, acfg) if pop.kind == "markov" else match_iid(y, acfg)
    out = Path(args.out or "match_report.json")
    ref = None
    if args.format == "csv":
        ref_path = out.with_suffix(".estimates.csv")
        ref_path.parent.mkdir(parents=True, exist_ok=True)
        with open(ref_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "estimate"])
            w.writerows(enumerate(rep.sample_estimates.tolist()))
        ref = ref_path.name
    rec = rep.to_record(ref)
    rec["seed"] = args.seed
    _write_json(out, rec)
    if not args.quiet:
        flag = " (ambiguous)" if rep.ambiguous else ""
        print(f"user {acfg.target_user} -> pseudonym {rep.claimed_pseudonym}{flag}; report at {out}")
    return EXIT_OK


def grid_from_config(cfg: dict, seed: int | None) -> SweepGrid:
    rec = dict(cfg.get("sweep", cfg))
    prefix = "sweep." if "sweep" in cfg else ""
    for key in ("n_values", "eta_values", "gamma_values"):
        _get(rec, key, list, prefix=prefix)
    if "trials" in rec and _get(rec, "trials", int, prefix=prefix) < 1:
        raise ConfigError(prefix + "trials", "must be >= 1")
    if seed is not None:
        rec["seed"] = seed
    allowed = {"n_values", "eta_values", "gamma_values", "c", "c_prime", "model", "r", "topology", "trials", "seed", "alpha", "budget", "center"}
    for k in rec:
        if k not in allowed:
            raise ConfigError(prefix + k, "unknown key")
    try:
        return SweepGrid.from_record(rec)
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(prefix.rstrip(".") or "<root>", str(e)) from None


def cmd_sweep(cfg: dict, args) -> int:
    grid = grid_from_config(cfg, args.seed)
    diagram = run_phase_sweep(grid)
    out = Path(args.out or ("sweep.csv" if args.format == "csv" else "sweep.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    export(diagram, out, "csv" if args.format == "csv" else "record")
    if not args.quiet:
        for (eta, gamma), label in diagram.classification.items():
            print(f"eta={eta:g} gamma={gamma:g}: {label}")
        print(f"seed {grid.seed}; results at {out}")
    if diagram.errors:
        for e in diagram.errors:
            print(f"budget exceeded for n={e['n']} eta={e['eta']} gamma={e['gamma']}: needs {e['needed']:.3g} draws (budget {e['budget']:.3g})", file=sys.stderr)
        return EXIT_BUDGET
    return EXIT_OK


def cmd_mi(cfg: dict, args) -> int:
    method = _get(cfg, "method", str, "exact-small")
    if method == "exact-small":
        n = _get(cfg, "n", int)
        try:
            est = exact_mi_small(
                n,
                _noise(cfg, ""),
                _observations(cfg, ""),
                k=_get(cfg, "k", int, 0),
                trials=_get(cfg, "trials", int, 1000),
                seed=args.seed,
            )
        except ValueError as e:
            raise ConfigError("n", str(e)) from None
    elif method in ("plugin", "plugin-lower-bound"):
        path = Path(_get(cfg, "pairs", str))
        if not path.exists():
            raise ConfigError("pairs", f"file not found: {path}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        est = plugin_mi_lower_bound(data[:, 0], data[:, 1])
    else:
        raise ConfigError("method", f"unknown method {method!r}")
    rec = est.to_record()
    rec.update({"seed": args.seed, "config": cfg, "version": __version__})
    if args.out:
        _write_json(Path(args.out), rec)
    if not args.quiet:
        print(f"I = {est.value_bits:.4f} +/- {est.std_error:.4f} bits ({est.method}, {est.trials} trials, seed {args.seed})")
    return EXIT_OK


def run_verification(seed: int = 0) -> dict[str, bool]:
    """Run the four oracle suites and return pass/fail per suite."""
    results = {}
    ok = True
    for i in range(20):
        N = 2 + i % 5
        inst = oracles.random_overlap_instance(N, seed=seed + i)
        exact = oracles.uniform_overlap_posterior(inst, 0)
        mc = oracles.overlap_posterior_mc(inst, 0, 200_000, seed=seed + i)
        ok &= exact.uniform and abs(mc.value - exact.value) <= 4 * mc.std_error
    results["overlap-posterior-uniformity"] = bool(ok)
    rep = oracles.bernoulli_average_convergence(0.3, lambda N: N**-0.5, [100, 10_000], 1000, seed=seed)
    ratio = rep.rows[0].variance / rep.rows[1].variance
    results["bernoulli-average-convergence"] = all(r.within_bound for r in rep.rows) and 100 / 1.3 <= ratio <= 100 * 1.3
    joint, events = oracles.nested_event_joint([10, 100, 1000])
    gap = oracles.conditional_mi_gap(joint, events)
    results["conditional-mi-gap"] = gap.shrinking and gap.gap[-1] < gap.gap[0]
    growth = oracles.lemma1_growth([1000, 10_000, 100_000], 0.5, trials=200, seed=seed)
    results["critical-set-growth"] = 0.10 <= growth.slope <= 0.40 and growth.exceedance[-1] >= 0.95
    return results


def cmd_verify(cfg: dict, args) -> int:
    seed = args.seed if args.seed is not None else _get(cfg, "seed", int, 0)
    results = run_verification(seed)
    for name, ok in results.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    if args.out:
        _write_json(Path(args.out), {"seed": seed, "results": results, "version": __version__})
    return EXIT_OK if all(results.values()) else EXIT_VERIFY


COMMANDS = {"generate": cmd_generate, "attack": cmd_attack, "sweep": cmd_sweep, "mi": cmd_mi, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anonmatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON or YAML config file")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="root seed, overrides the config")
        p.add_argument("--format", choices=("csv", "record"), default="csv")
        p.add_argument("--quiet", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is None and "seed" in cfg:
            args.seed = _get(cfg, "seed", int)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

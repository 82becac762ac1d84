"""Experiment orchestration, reports and the ``ualign`` command line."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .engine import EnumerationCapError, worst_pure_opponent_weak
from .instances import (
    InstanceSpec,
    condorcet_cycle_instance,
    majority_instance,
    uniform_pl_instance,
    uniform_rankings_instance,
)
from .prefcore import Multiset, Policy, PreferenceModel, ProductPolicy, check_properties
from .solvers import (
    SelfPlayTrace,
    SolverConfig,
    certify,
    find_fixed_point,
    nlhf_solve,
    rate_threshold,
    selfplay,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
TARGETS = ("prop-2.2", "prop-3.2", "prop-3.3", "prop-4.1", "thm-4.3", "prop-4.3", "thm-4.4")


class UsageError(ValueError):
    """Invalid configuration; the message names the offending field."""


class PolicyParseError(ValueError):
    pass


@dataclass
class ReportRow:
    target: str
    instance: str
    prompt: str
    k: int
    l: int
    algorithm: str
    iterations: int
    seed: int
    certified_rate: float
    threshold: float
    regret_per_round: float
    relation: str
    tol: float
    witness: str
    passed: bool
    policy: str = ""
    note: str = ""
    wall_time: float = 0.0

    @property
    def bound(self) -> float:
        return self.threshold - self.regret_per_round

    def consistent(self) -> bool:
        return self.passed == _compare(self.certified_rate, self.bound, self.relation, self.tol)


CSV_COLUMNS = [f.name for f in fields(ReportRow)]


def _compare(value: float, bound: float, relation: str, tol: float) -> bool:
    if relation == ">=":
        return value >= bound - tol
    if relation == "<=":
        return value <= bound + tol
    if relation == "==":
        return abs(value - bound) <= tol
    raise ValueError(f"unknown relation {relation!r}")


def make_row(*, value: float, threshold: float, relation: str = ">=", tol: float = 1e-9,
             regret_per_round: float = 0.0, **kw) -> ReportRow:
    passed = _compare(value, threshold - regret_per_round, relation, tol)
    kw.setdefault("witness", "")
    return ReportRow(certified_rate=float(value), threshold=float(threshold), regret_per_round=float(regret_per_round),
                     relation=relation, tol=tol, passed=bool(passed), **kw)


@dataclass
class Report:
    command: str
    rows: list[ReportRow] = field(default_factory=list)
    schema_version: str = SCHEMA_VERSION

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "command": self.command,
            "passed": self.passed,
            "rows": [asdict(r) for r in self.rows],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Report":
        return cls(doc["command"], [ReportRow(**r) for r in doc["rows"]], doc["schema_version"])

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\r\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _csv_cell(v) for k, v in asdict(r).items()})
        return buf.getvalue()

    def write(self, out: str | Path, stem: str) -> tuple[Path, Path]:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        json_path, csv_path = out / f"{stem}.json", out / f"{stem}.csv"
        _atomic_write(json_path, json.dumps(self.to_dict(), indent=2) + "\n")
        _atomic_write(csv_path, self.csv_text())
        return json_path, csv_path


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _witness(m: PreferenceModel, s: Multiset) -> str:
    return "+".join(m.label(y) for y in s)


def _policy_str(p: np.ndarray) -> str:
    return ";".join(repr(float(x)) for x in p)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    instance: InstanceSpec
    ks: list[int]
    ls: list[int] = field(default_factory=lambda: [1])
    solver: SolverConfig = field(default_factory=SolverConfig)
    out: Path | None = None
    seed: int = 0
    cap: int | None = None
    iters_grid: list[int] | None = None

    def __post_init__(self):
        if not self.ks:
            raise UsageError("k: at least one value is required")
        if any(k < 1 for k in self.ks):
            raise UsageError(f"k: values must be >= 1, got {self.ks}")
        if not self.ls or any(ell < 1 for ell in self.ls):
            raise UsageError(f"l: values must be >= 1, got {self.ls}")
        if self.iters_grid is not None and (not self.iters_grid or any(t < 1 for t in self.iters_grid)):
            raise UsageError(f"iters: grid values must be >= 1, got {self.iters_grid}")


def _int_list(raw, name: str) -> list[int]:
    if raw is None:
        return []
    if isinstance(raw, str):
        raw = [s for s in raw.split(",") if s.strip()]
    elif isinstance(raw, int):
        raw = [raw]
    try:
        return [int(x) for x in raw]
    except (TypeError, ValueError):
        raise UsageError(f"{name}: expected integers, got {raw!r}") from None


def _parse_eta(raw):
    if raw is None or raw == "auto":
        return "auto"
    try:
        return float(raw)
    except ValueError:
        raise UsageError(f"eta: expected a positive number or 'auto', got {raw!r}") from None


def config_from_document(doc: dict) -> ExperimentConfig:
    """Build a config from the JSON config layout (flat keys plus an optional ``solver`` block)."""
    if "instance" not in doc:
        raise UsageError("instance: missing")
    try:
        spec = InstanceSpec.parse(str(doc["instance"]))
    except ValueError as e:
        raise UsageError(f"instance: {e}") from None
    sol = dict(doc.get("solver", {}))
    for key in ("algorithm", "iterations", "eta", "tol", "init"):
        if key in doc and key not in sol:
            sol[key] = doc[key]
    if "algo" in doc and "algorithm" not in sol:
        sol["algorithm"] = doc["algo"]
    if "iters" in doc and "iterations" not in sol and not isinstance(doc["iters"], (list, str)):
        sol["iterations"] = doc["iters"]
    seed = int(doc.get("seed", sol.get("seed", 0)))
    try:
        solver = SolverConfig(
            algorithm=sol.get("algorithm", "mwu"),
            iterations=int(sol.get("iterations", 1000)),
            eta=_parse_eta(sol.get("eta")),
            seed=int(sol.get("seed", seed)),
            tol=float(sol.get("tol", 1e-9)),
            init=sol.get("init", "uniform"),
        )
    except ValueError as e:
        raise UsageError(f"solver: {e}") from None
    grid = doc.get("iters_grid")
    if grid is None and isinstance(doc.get("iters"), (list, str)):
        grid = doc["iters"]
    return ExperimentConfig(
        instance=spec,
        ks=_int_list(doc.get("k"), "k"),
        ls=_int_list(doc.get("l", [1]), "l"),
        solver=solver,
        out=Path(doc["out"]) if doc.get("out") else None,
        seed=seed,
        cap=int(doc["cap"]) if doc.get("cap") is not None else None,
        iters_grid=_int_list(grid, "iters_grid") if grid is not None else None,
    )


# ---------------------------------------------------------------------------
# commands


def _run_solver(model: PreferenceModel, k: int, solver: SolverConfig):
    if solver.algorithm == "lp-nlhf":
        return nlhf_solve(model, solver)
    return selfplay(model, k, solver)


def _certify_rows(target: str, spec: str, model: PreferenceModel, k: int, ls: Sequence[int], obj,
                  solver: SolverConfig, cap: int | None, started: float) -> list[ReportRow]:
    rows = []
    for ell in ls:
        rep = certify(obj, k, ell, model, tol=solver.tol, cap=cap)
        if isinstance(obj, SelfPlayTrace):
            policy, iters = obj.last.probs, obj.T
        else:
            policy, iters = obj.probs, 0
        rows.append(make_row(
            target=target, instance=spec, prompt=model.prompt or "", k=k, l=ell, algorithm=solver.algorithm,
            iterations=iters, seed=solver.seed, value=rep.certified_rate, threshold=rep.threshold,
            regret_per_round=rep.regret_slack, tol=rep.tolerance, witness=_witness(model, rep.witness),
            policy=_policy_str(policy), wall_time=time.perf_counter() - started,
        ))
    return rows


def cmd_solve(config: ExperimentConfig) -> Report:
    """Solve every (prompt, k) game and certify against each opponent size."""
    report = Report("solve")
    for model in config.instance.build():
        nlhf = None
        for k in config.ks:
            started = time.perf_counter()
            if config.solver.algorithm == "lp-nlhf":
                nlhf = nlhf if nlhf is not None else nlhf_solve(model, config.solver)
                obj = nlhf
            else:
                obj = selfplay(model, k, config.solver)
            report.rows += _certify_rows("solve", str(config.instance), model, k, config.ls, obj,
                                         config.solver, config.cap, started)
            log.info("solved %s k=%d", model.prompt or config.instance, k)
    return report


def parse_policy_file(path: str | Path, n: int | None = None) -> Policy:
    """Read a policy from JSON: either a bare list of probabilities or ``{"probs": [...]}``."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise PolicyParseError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    probs = doc.get("probs") if isinstance(doc, dict) else doc
    if not isinstance(probs, list) or not all(isinstance(x, (int, float)) for x in probs):
        raise PolicyParseError(f"{path}:1:1: expected a list of probabilities or an object with 'probs'")
    try:
        pi = Policy(np.asarray(probs, dtype=float))
    except ValueError as e:
        raise PolicyParseError(f"{path}: {e}") from None
    if n is not None and pi.n != n:
        raise PolicyParseError(f"{path}: policy has {pi.n} entries, instance has {n} responses")
    return pi


def cmd_certify(policy_path: str | Path, instance: InstanceSpec, ks: Sequence[int], ls: Sequence[int] = (1,),
                cap: int | None = None) -> Report:
    """Certify ``pi^k`` from a policy file against size-``l`` opponents."""
    if not ks:
        raise UsageError("k: at least one value is required")
    report = Report("certify")
    solver = SolverConfig(algorithm="lp-nlhf")
    for model in instance.build():
        pi = parse_policy_file(policy_path, model.n)
        for k in ks:
            rows = _certify_rows("certify", str(instance), model, k, ls, pi, solver, cap, time.perf_counter())
            for r in rows:
                r.algorithm = "policy-file"
            report.rows += rows
    return report


def cmd_sweep(config: ExperimentConfig) -> Report:
    """Certified rate and its regret bound over a ``k`` grid and an iteration grid."""
    report = Report("sweep")
    grid = config.iters_grid or [config.solver.iterations]
    for model in config.instance.build():
        for k in config.ks:
            for T in grid:
                solver = SolverConfig(config.solver.algorithm, T, config.solver.eta, config.solver.seed,
                                      config.solver.tol, config.solver.init)
                started = time.perf_counter()
                obj = _run_solver(model, k, solver)
                report.rows += _certify_rows("sweep", str(config.instance), model, k, config.ls, obj,
                                             solver, config.cap, started)
    return report


# ---------------------------------------------------------------------------
# reproductions


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _random_pl_mixture(seed: int, n: int = 4, comps: int = 3) -> PreferenceModel:
    rng = _rng(seed)
    return PreferenceModel.pl(rng.dirichlet(np.ones(comps)), rng.normal(0.0, 2.0, size=(comps, n)),
                              [f"y{i + 1}" for i in range(n)], "random-pl")


def _repro_prop_2_2(seed: int) -> list[ReportRow]:
    models = {
        "majority:0.1": majority_instance(0.1),
        "condorcet-cycle": condorcet_cycle_instance(),
        "uniform-rankings:4": uniform_rankings_instance(4),
        "uniform-pl:3": uniform_pl_instance(3),
        "random-pl": _random_pl_mixture(seed),
    }
    rows = []
    for name, m in models.items():
        t0 = time.perf_counter()
        rep = check_properties(m, trials=200, seed=seed)
        rows.append(make_row(
            target="prop-2.2", instance=name, prompt="", k=4, l=1, algorithm="property-check", iterations=200,
            seed=seed, value=len(rep.failures), threshold=0.0, relation="==", tol=0.0,
            note=f"checks={rep.checks} worst_copy_margin={rep.worst_copy_margin:.3e} "
                 f"worst_subadditivity_slack={rep.worst_subadditivity_slack:.3e}",
            wall_time=time.perf_counter() - t0,
        ))
    return rows


def _repro_prop_3_2(seed: int) -> list[ReportRow]:
    rows = []
    for k in (1, 2, 3):
        t0 = time.perf_counter()
        m = uniform_pl_instance(k)
        rng = _rng(seed + k)
        policies = [Policy.uniform(m.n)] + [Policy(rng.dirichlet(np.ones(m.n))) for _ in range(20)]
        target = k / (k + 1)
        rates = [worst_pure_opponent_weak(ProductPolicy(p, k), 1, m)[1] for p in policies]
        worst = max(rates, key=lambda r: abs(r - target))
        rows.append(make_row(
            target="prop-3.2", instance=f"uniform-pl:{k}", prompt="", k=k, l=1, algorithm="any-policy",
            iterations=0, seed=seed, value=worst, threshold=target, relation="==", tol=1e-12,
            note=f"policies={len(policies)}", wall_time=time.perf_counter() - t0,
        ))
    return rows


def _repro_prop_3_3(seed: int) -> list[ReportRow]:
    rows = []
    m = uniform_rankings_instance(4)
    for k in (1, 2):
        t0 = time.perf_counter()
        rng = _rng(seed + k)
        policies = [Policy(rng.dirichlet(np.full(m.n, alpha))) for alpha in np.geomspace(0.1, 10.0, 50)]
        rates = [worst_pure_opponent_weak(ProductPolicy(p, k), 1, m)[1] for p in policies]
        best = int(np.argmax(rates))
        rows.append(make_row(
            target="prop-3.3", instance="uniform-rankings:4", prompt="", k=k, l=1, algorithm="random-product",
            iterations=0, seed=seed, value=rates[best], threshold=k / (k + 1) * (1 + 1 / m.n), relation="<=",
            tol=1e-12, policy=_policy_str(policies[best].probs), note=f"policies={len(policies)}",
            wall_time=time.perf_counter() - t0,
        ))
    return rows


def _mpne(model: PreferenceModel, k: int, tol: float = 1e-12):
    return find_fixed_point(model, k, SolverConfig(algorithm="projected-gradient", iterations=200_000, tol=tol))


def _repro_prop_4_1(seed: int) -> list[ReportRow]:
    eps = 0.1
    m = majority_instance(eps)
    rows = []
    t0 = time.perf_counter()
    nlhf = nlhf_solve(m)
    for k in (1, 2, 4, 8):
        rep = certify(nlhf, k, 1, m)
        rows.append(make_row(
            target="prop-4.1", instance="majority:0.1", prompt="", k=k, l=1, algorithm="nlhf", iterations=0,
            seed=seed, value=rep.certified_rate, threshold=0.5 + eps, relation="==", tol=1e-12,
            witness=_witness(m, rep.witness), policy=_policy_str(nlhf.probs),
            note=f"k/(k+1)={k / (k + 1):.6f}", wall_time=time.perf_counter() - t0,
        ))
    for k in (1, 2, 4, 8):
        t0 = time.perf_counter()
        cand = _mpne(m, k)
        rep = certify(cand.policy, k, 1, m)
        rows.append(make_row(
            target="prop-4.1", instance="majority:0.1", prompt="", k=k, l=1, algorithm="mpne-pga",
            iterations=cand.iterations, seed=seed, value=rep.certified_rate, threshold=rep.threshold,
            tol=1e-6, witness=_witness(m, rep.witness), policy=_policy_str(cand.policy.probs),
            note=f"residual={cand.residual:.2e} gap={cand.gap:.2e}", wall_time=time.perf_counter() - t0,
        ))
    return rows


def _repro_thm_4_3(seed: int) -> list[ReportRow]:
    rows = []
    tol = 1e-10
    for name, m in (("majority:0.1", majority_instance(0.1)), ("condorcet-cycle", condorcet_cycle_instance())):
        for k in (1, 2, 3):
            t0 = time.perf_counter()
            cand = _mpne(m, k, tol)
            rep = certify(cand.policy, k, 1, m)
            rows.append(make_row(
                target="thm-4.3", instance=name, prompt="", k=k, l=1, algorithm="mpne-pga",
                iterations=cand.iterations, seed=seed, value=rep.certified_rate, threshold=rep.threshold,
                tol=10 * tol, witness=_witness(m, rep.witness), policy=_policy_str(cand.policy.probs),
                note=f"residual={cand.residual:.2e} gap={cand.gap:.2e} converged={cand.converged}",
                wall_time=time.perf_counter() - t0,
            ))
    return rows


def _mwu_rows(target: str, ks, ls, seed: int, T: int = 10_000) -> list[ReportRow]:
    rows = []
    solver = SolverConfig(algorithm="mwu", iterations=T, seed=seed, init="random")
    for name, m in (("majority:0.1", majority_instance(0.1)), ("condorcet-cycle", condorcet_cycle_instance())):
        for k in ks:
            t0 = time.perf_counter()
            trace = selfplay(m, k, solver)
            rows += _certify_rows(target, name, m, k, ls, trace, solver, None, t0)
            if target == "prop-4.3":
                rows.append(make_row(
                    target=target, instance=name, prompt="", k=k, l=1, algorithm="mwu-regret", iterations=T,
                    seed=seed, value=trace.regret_per_round, threshold=2 * math.sqrt(math.log(m.n) / T),
                    relation="<=", tol=0.0, note=f"raw_regret={trace.raw_regret:.6e}",
                    wall_time=time.perf_counter() - t0,
                ))
    return rows


def _repro_prop_4_3(seed: int) -> list[ReportRow]:
    return _mwu_rows("prop-4.3", (1, 2, 3), (1,), seed)


def _repro_thm_4_4(seed: int) -> list[ReportRow]:
    return _mwu_rows("thm-4.4", (4,), (1, 2, 3), seed)


REPRODUCTIONS: dict[str, Callable[[int], list[ReportRow]]] = {
    "prop-2.2": _repro_prop_2_2,
    "prop-3.2": _repro_prop_3_2,
    "prop-3.3": _repro_prop_3_3,
    "prop-4.1": _repro_prop_4_1,
    "thm-4.3": _repro_thm_4_3,
    "prop-4.3": _repro_prop_4_3,
    "thm-4.4": _repro_thm_4_4,
}


def cmd_reproduce(target: str, seed: int = 0) -> Report:
    if target not in REPRODUCTIONS:
        raise UsageError(f"target: must be one of {', '.join(TARGETS)}, got {target!r}")
    return Report(f"reproduce {target}", REPRODUCTIONS[target](seed))


# ---------------------------------------------------------------------------
# CLI


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document; explicit flags override it")
    common.add_argument("--instance", help="majority:EPS | condorcet-cycle | uniform-pl:K | uniform-rankings:M | custom:PATH")
    common.add_argument("--k", help="comma-separated list of k values")
    common.add_argument("--l", help="comma-separated list of opponent sizes")
    common.add_argument("--algo", choices=["mwu", "projected-gradient", "lp-nlhf"])
    common.add_argument("--iters", help="iteration count, or a comma-separated grid for sweep")
    common.add_argument("--eta", help="step size or 'auto'")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory for JSON and CSV files")
    common.add_argument("--cap", type=int, help="enumeration term cap (default from $UALIGN_CAP or 1e7)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ualign", description="Alignment-game solvers and win-rate certificates.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve and certify an instance")
    c = sub.add_parser("certify", parents=[common], help="certify a policy file")
    c.add_argument("policy", help="JSON policy file")
    r = sub.add_parser("reproduce", parents=[common], help="run a fixed desk-scale reproduction")
    r.add_argument("target", choices=TARGETS)
    sub.add_parser("sweep", parents=[common], help="rate-vs-k and rate-vs-T curves")
    return p


def _config_from_args(args) -> ExperimentConfig:
    doc: dict = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"config: {e}") from None
    overrides = {"instance": args.instance, "k": args.k, "l": args.l, "algo": args.algo, "eta": args.eta,
                 "seed": args.seed, "out": args.out, "cap": args.cap}
    for key, val in overrides.items():
        if val is not None:
            doc[key] = val
    for key, val in (("algorithm", args.algo), ("eta", args.eta), ("seed", args.seed)):
        if val is not None:
            doc.setdefault("solver", {})[key] = val
    if args.iters is not None:
        vals = _int_list(args.iters, "iters")
        if args.command == "sweep":
            doc["iters_grid"] = vals
        else:
            if len(vals) != 1:
                raise UsageError("iters: a single value is expected outside sweep")
            doc.setdefault("solver", {})["iterations"] = vals[0]
    return config_from_document(doc)


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    out = args.out
    try:
        if args.command == "reproduce":
            report = cmd_reproduce(args.target, args.seed or 0)
            stem = args.target
        elif args.command == "certify":
            if not args.instance or not args.k:
                raise UsageError("certify needs --instance and --k")
            try:
                spec = InstanceSpec.parse(args.instance)
            except ValueError as e:
                raise UsageError(f"instance: {e}") from None
            report = cmd_certify(args.policy, spec, _int_list(args.k, "k"), _int_list(args.l or "1", "l"), args.cap)
            stem = "certify"
        else:
            config = _config_from_args(args)
            report = cmd_solve(config) if args.command == "solve" else cmd_sweep(config)
            stem = args.command
            out = config.out
    except (UsageError, PolicyParseError) as e:
        print(f"ualign: error: {e}", file=sys.stderr)
        return 2
    except EnumerationCapError as e:
        print(f"ualign: error: {e}", file=sys.stderr)
        return 3
    if out:
        paths = report.write(out, stem)
        log.info("wrote %s", ", ".join(map(str, paths)))
    sys.stdout.write(report.csv_text())
    fails = sum(not r.passed for r in report.rows)
    print(f"# {len(report.rows) - fails}/{len(report.rows)} rows pass", file=sys.stderr)
    return 0 if report.passed else 1

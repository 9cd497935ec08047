"""Command-line front end for simulation, testing, herding, and OPE studies.

Subcommands
-----------
simulate   draw one logged dataset and write it as CSV
test       run policy tests (dr-kpt / kpt / pt-linear) on one dataset
calibrate  replicate a test under the null; dump rates, statistics, QQ pairs
power      replicate tests across sample sizes; dump rejection rates
herd       herd outcome samples from the fitted embeddings of one dataset
ope        recommendation off-policy evaluation MSE sweep over alpha

Configuration resolves in three layers: documented defaults, then an
INI-style config file (one flat ``key = value`` section per command, passed
via ``--config``), then explicit command-line flags.  Every run requires an
explicit seed and writes a JSON manifest next to its outputs; passing a
manifest to ``--config`` replays the recorded run.  The output root defaults
to the ``CPME_OUT`` environment variable, falling back to ./cpme-out.

All output files are pure functions of the resolved configuration: rerunning
a command reproduces them byte for byte (wall-clock measurements are printed,
never persisted).

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats as _sstats

from . import __version__
from .data_policies import (
    ALL_KINDS,
    HERD_KINDS,
    OPE_KIND,
    TEST_KINDS,
    LoggedDataset,
    ScenarioSpec,
    child_seed,
    generate,
    rng_stream,
)
from .herding import samples_to_csv
from .metrics import herding_rep, run_herding_study, run_ope_study
from .nuisance import DEFAULT_LAMBDA_GRID, OPE_LAMBDA_GRID
from .testing import METHODS, StudyTable, dr_kpt, kpt_permutation, pt_linear, run_study

#: environment variable naming the default output root
ENV_OUT = "CPME_OUT"

#: bumped whenever any emitted CSV column set changes
SCHEMA_VERSION = 1


class ConfigError(Exception):
    """Invalid or incomplete run configuration (exit code 2)."""


#: documented defaults per command; config files and flags override in turn
DEFAULTS: dict[str, dict] = {
    "simulate": {"n": 400},
    "test": {
        "scenario": "II",
        "n": 400,
        "method": ["dr-kpt"],
        "alpha": 0.05,
        "n_perm": 10000,
        "mc_draws": 8,
        "lambda_grid": list(DEFAULT_LAMBDA_GRID),
        "no_split": False,
    },
    "calibrate": {
        "scenario": "I",
        "n": 400,
        "reps": 100,
        "method": ["dr-kpt"],
        "alpha": 0.05,
        "n_perm": 10000,
        "mc_draws": 8,
        "lambda_grid": list(DEFAULT_LAMBDA_GRID),
        "no_split": False,
        "jobs": 1,
    },
    "power": {
        "scenario": "II",
        "n": [100, 200, 400],
        "reps": 100,
        "method": list(METHODS),
        "alpha": 0.05,
        "n_perm": 10000,
        "mc_draws": 8,
        "lambda_grid": list(DEFAULT_LAMBDA_GRID),
        "no_split": False,
        "jobs": 1,
    },
    "herd": {
        "n": 1000,
        "herd_m": 500,
        "grid_points": 2048,
        "reps": 1,
        "mc_draws": 32,
        "lambda_grid": list(DEFAULT_LAMBDA_GRID),
        "jobs": 1,
    },
    "ope": {
        "n": 2000,
        "reps": 30,
        "alpha": [-1.0, 0.0, 1.0],
        "mc_draws": 32,
        "lambda_grid": list(OPE_LAMBDA_GRID),
        "jobs": 1,
    },
}

#: option keys whose values are lists (split on whitespace/commas in configs)
_MULTI_KEYS = {"method", "lambda_grid", "alpha", "n"}


@dataclass(frozen=True)
class RunConfig:
    """One command's resolved parameters (defaults < config file < flags)."""

    command: str
    params: dict

    def __post_init__(self):
        if self.params.get("seed") is None:
            raise ConfigError("explicit seed required")

    def __getattr__(self, name):
        try:
            return self.params[name]
        except KeyError:
            raise AttributeError(name) from None

    def get(self, name, default=None):
        return self.params.get(name, default)


# ---------------------------------------------------------------------------
# argument parsing and config-file merging
# ---------------------------------------------------------------------------


def _adder(sub: argparse.ArgumentParser, defaults: dict):
    """add_argument wrapper: SUPPRESS defaults, document them in the help."""

    def add(*names, **kw):
        dest = kw.get("dest") or names[0].lstrip("-").replace("-", "_")
        if dest in defaults:
            kw["help"] = f"{kw.get('help', '')} (default: {defaults[dest]})"
        kw["default"] = argparse.SUPPRESS
        sub.add_argument(*names, **kw)

    return add


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="cpme", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument("--version", action="version", version=f"cpme {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)
    by_command: dict[str, argparse.ArgumentParser] = {}

    def new(cmd, help_):
        sub = subs.add_parser(cmd, help=help_)
        by_command[cmd] = sub
        add = _adder(sub, DEFAULTS[cmd])
        add("--config", help="INI config file or a manifest JSON to replay")
        add("--seed", type=int, help="base seed (required; no wall-clock seeding)")
        add("--out", help=f"output directory (default: ${ENV_OUT} or ./cpme-out)")
        return add

    add = new("simulate", "draw one logged dataset and write it as CSV")
    add("--scenario", choices=ALL_KINDS, help="scenario kind")
    add("--n", type=int, help="sample size")
    add("--alpha", type=float, help="logging/target similarity (recommendation scenario)")

    add = new("test", "run policy tests on one dataset")
    add("--scenario", choices=TEST_KINDS, help="scenario kind (also names the policy pair for --data)")
    add("--data", help="logged dataset CSV (generated from the scenario when omitted)")
    add("--n", type=int, help="sample size when generating")
    add("--method", nargs="+", choices=METHODS, help="tests to run")
    add("--alpha", type=float, help="test level")
    add("--n-perm", type=int, help="permutations for kpt / pt-linear")
    add("--mc-draws", type=int, help="Monte-Carlo draws per policy integral")
    add("--lambda", dest="lam", type=float, help="fixed ridge penalty (skips CV)")
    add("--lambda-grid", nargs="+", type=float, help="CV grid for the ridge penalty")
    add("--no-split", action="store_true", help="fit and evaluate on all n samples")

    for cmd, help_ in (
        ("calibrate", "replicate a test under the null (rates, statistics, QQ pairs)"),
        ("power", "replicate tests across sample sizes (rejection rates)"),
    ):
        add = new(cmd, help_)
        add("--scenario", choices=TEST_KINDS, help="scenario kind")
        if cmd == "power":
            add("--n", nargs="+", type=int, help="sample-size grid")
        else:
            add("--n", type=int, help="sample size")
        add("--reps", type=int, help="replications")
        add("--method", nargs="+", choices=METHODS, help="tests to run")
        add("--alpha", type=float, help="test level")
        add("--n-perm", type=int, help="permutations for kpt / pt-linear")
        add("--mc-draws", type=int, help="Monte-Carlo draws per policy integral")
        add("--lambda", dest="lam", type=float, help="fixed ridge penalty (skips CV)")
        add("--lambda-grid", nargs="+", type=float, help="CV grid for the ridge penalty")
        add("--no-split", action="store_true", help="fit and evaluate on all n samples")
        add("--jobs", type=int, help="parallel replication workers")

    add = new("herd", "herd outcome samples from the fitted embeddings")
    add("--scenario", choices=HERD_KINDS, help="herding scenario kind")
    add("--n", type=int, help="logged sample size")
    add("--herd-m", type=int, help="number of herded samples")
    add("--grid-points", type=int, help="candidate grid resolution")
    add("--reps", type=int, help="replications for the distance table")
    add("--mc-draws", type=int, help="Monte-Carlo draws per policy integral")
    add("--lambda", dest="lam", type=float, help="fixed ridge penalty (skips CV)")
    add("--lambda-grid", nargs="+", type=float, help="CV grid for the ridge penalty")
    add("--jobs", type=int, help="parallel replication workers")

    add = new("ope", "recommendation OPE: per-method MSE over the alpha sweep")
    add("--n", type=int, help="logged sample size")
    add("--reps", type=int, help="replications per alpha")
    add("--alpha", nargs="+", type=float, help="logging/target similarity values")
    add("--mc-draws", type=int, help="Monte-Carlo draws per policy integral")
    add("--lambda-grid", nargs="+", type=float, help="CV grid for the ridge penalty")
    add("--jobs", type=int, help="parallel replication workers")

    return parser, by_command


def _config_argv(path: str, command: str) -> list[str]:
    """Translate one config-file section (or a manifest) into flag tokens."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    if p.suffix == ".json":
        manifest = json.loads(p.read_text())
        if manifest.get("command") != command:
            raise ConfigError(
                f"manifest {path} records command {manifest.get('command')!r}, not {command!r}"
            )
        section = {k: v for k, v in manifest["config"].items()}
    else:
        ini = configparser.ConfigParser()
        try:
            ini.read_string(p.read_text(), source=path)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}") from None
        if not ini.has_section(command):
            return []
        section = dict(ini.items(command))
    argv: list[str] = []
    for key, value in section.items():
        key = key.replace("-", "_")
        flag = "--" + key.replace("_", "-")
        if key == "lam":
            flag = "--lambda"
        if isinstance(value, bool) or (isinstance(value, str) and key == "no_split"):
            truthy = value if isinstance(value, bool) else value.strip().lower() in ("1", "true", "yes", "on")
            if truthy:
                argv.append(flag)
            continue
        if isinstance(value, (list, tuple)):
            tokens = [str(v) for v in value]
        else:
            tokens = str(value).replace(",", " ").split()
        if value is None or not tokens:
            continue
        if len(tokens) > 1 and key not in _MULTI_KEYS:
            raise ConfigError(f"config key {key!r} takes a single value, got {tokens!r}")
        argv.append(flag)
        argv.extend(tokens)
    return argv


def resolve_config(argv: list[str] | None = None) -> RunConfig:
    parser, by_command = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    ns = argparse.Namespace(**DEFAULTS[command])
    if getattr(args, "config", None):
        by_command[command].parse_args(_config_argv(args.config, command), namespace=ns)
    for key, value in vars(args).items():
        if key != "command":
            setattr(ns, key, value)
    params = vars(ns)
    params.pop("config", None)
    params.setdefault("seed", None)
    return RunConfig(command, params)


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------


def _out_dir(cfg: RunConfig) -> Path:
    root = cfg.get("out") or os.environ.get(ENV_OUT) or "cpme-out"
    path = Path(root)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {exc}") from None
    return path


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _write_manifest(cfg: RunConfig, out: Path, outputs: dict, schemas: dict, extra: dict | None = None) -> Path:
    manifest = {
        "version": __version__,
        "schema_version": SCHEMA_VERSION,
        "command": cfg.command,
        "config": _jsonable(cfg.params),
        "outputs": outputs,
        "schemas": schemas,
    }
    if extra:
        manifest.update(_jsonable(extra))
    path = out / f"{cfg.command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _require(cfg: RunConfig, key: str, what: str):
    value = cfg.get(key)
    if value is None:
        raise ConfigError(f"{what} required (--{key.replace('_', '-')})")
    return value


def _positive(cfg: RunConfig, key: str):
    value = cfg.get(key)
    if value is not None and value < 1:
        raise ConfigError(f"--{key.replace('_', '-')} must be >= 1, got {value}")
    return value


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _scenario_spec(cfg: RunConfig, kind: str, n: int) -> ScenarioSpec:
    if kind == OPE_KIND:
        alpha = cfg.get("alpha")
        alpha = -1.0 if alpha is None else float(alpha)
        return ScenarioSpec(kind, n=n, d=10, seed=cfg.seed, alpha=alpha)
    return ScenarioSpec(kind, n=n, seed=cfg.seed)


def cmd_simulate(cfg: RunConfig) -> int:
    kind = _require(cfg, "scenario", "scenario kind")
    n = _positive(cfg, "n")
    spec = _scenario_spec(cfg, kind, n)
    out = _out_dir(cfg)
    data = generate(spec).data
    data_path = out / "simulate_data.csv"
    data.to_csv(data_path)
    with open(data_path) as fh:
        columns = fh.readline().strip().split(",")
    _write_manifest(
        cfg,
        out,
        outputs={"data": data_path.name},
        schemas={data_path.name: {"columns": columns, "version": SCHEMA_VERSION}},
        extra={"scenario_spec": asdict(spec)},
    )
    print(f"wrote {data_path} ({data.n} rows, d={data.d})")
    return 0


def _test_policies_for(cfg: RunConfig, kind: str, data: LoggedDataset):
    # the policy pair is a pure function of (kind, d); a throwaway two-row
    # generation builds it without touching the logged data
    scen = generate(ScenarioSpec(kind, n=2, d=data.d, seed=cfg.seed))
    return scen.pi, scen.pi_prime


def cmd_test(cfg: RunConfig) -> int:
    kind = cfg.scenario
    methods = cfg.method
    if cfg.get("data"):
        try:
            data = LoggedDataset.from_csv(cfg.data)
        except FileNotFoundError:
            raise ConfigError(f"dataset file not found: {cfg.data}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        n = _positive(cfg, "n")
        data = generate(ScenarioSpec(kind, n=n, seed=cfg.seed)).data
    pi, pi2 = _test_policies_for(cfg, kind, data)
    out = _out_dir(cfg)
    records = []
    for mi, method in enumerate(methods):
        mseed = child_seed(cfg.seed, mi)
        if method == "dr-kpt":
            res = dr_kpt(
                data, pi, pi2, cfg.alpha,
                lam=cfg.get("lam"), lambda_grid=cfg.lambda_grid,
                mc_draws=cfg.mc_draws, seed=mseed, no_split=cfg.no_split,
            )
        elif method == "kpt":
            res = kpt_permutation(data, pi, pi2, cfg.n_perm, rng_stream(mseed, 7), alpha=cfg.alpha)
        else:
            res = pt_linear(data, pi, pi2, cfg.n_perm, rng_stream(mseed, 7), alpha=cfg.alpha)
        record = asdict(res)
        runtime = record["diagnostics"].pop("runtime_s", None)  # keep files reproducible
        records.append(record)
        note = f" [{runtime:.2f}s]" if runtime is not None else ""
        print(f"{method:9s} stat={res.statistic:+.4f}  p={res.p_value:.4f}  reject={res.reject}{note}")
    results_path = out / "test_results.json"
    results_path.write_text(json.dumps(_jsonable({"results": records}), indent=2, sort_keys=True) + "\n")
    _write_manifest(cfg, out, outputs={"results": results_path.name}, schemas={})
    return 0


def _run_study_from(cfg: RunConfig, n_grid) -> StudyTable:
    _positive(cfg, "reps")
    _positive(cfg, "jobs")
    return run_study(
        cfg.scenario,
        n_grid,
        cfg.reps,
        methods=tuple(cfg.method),
        alpha=cfg.alpha,
        seed=cfg.seed,
        n_perm=cfg.n_perm,
        mc_draws=cfg.mc_draws,
        lam=cfg.get("lam"),
        lambda_grid=tuple(cfg.lambda_grid),
        no_split=cfg.no_split,
        jobs=cfg.jobs,
    )


def _write_rates(table, path: Path) -> list[str]:
    # the library CSV carries wall-clock runtimes; the CLI variant drops them
    # so that reruns are byte-identical
    columns = ["scenario", "n", "method", "rate", "ci_low", "ci_high", "reps"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for r in table.rows:
            fh.write(f"{r.scenario},{r.n},{r.method},{r.rate!r},{r.ci_low!r},{r.ci_high!r},{r.reps}\n")
    return columns


def cmd_calibrate(cfg: RunConfig) -> int:
    n = _positive(cfg, "n")
    out = _out_dir(cfg)
    table = _run_study_from(cfg, [n])
    rates_path = out / "calibrate_rates.csv"
    columns = _write_rates(table, rates_path)
    outputs = {"rates": rates_path.name}
    schemas = {rates_path.name: {"columns": columns, "version": SCHEMA_VERSION}}
    for method in cfg.method:
        stats_path = out / f"calibrate_stats_{method}.csv"
        table.dump_statistics(stats_path, n, method)
        outputs[f"statistics_{method}"] = stats_path.name
        schemas[stats_path.name] = {"columns": ["rep", "t_stat"], "version": SCHEMA_VERSION}
    if "dr-kpt" in cfg.method:
        t = np.sort(np.asarray(table.statistics[(n, "dr-kpt")], dtype=float))
        theo = _sstats.norm.ppf((np.arange(1, len(t) + 1) - 0.5) / len(t))
        qq_path = out / "calibrate_qq.csv"
        with open(qq_path, "w", newline="") as fh:
            fh.write("theoretical,empirical\n")
            for a, b in zip(theo, t):
                fh.write(f"{float(a)!r},{float(b)!r}\n")
        outputs["qq"] = qq_path.name
        schemas[qq_path.name] = {"columns": ["theoretical", "empirical"], "version": SCHEMA_VERSION}
    _write_manifest(cfg, out, outputs, schemas)
    for r in table.rows:
        print(f"{r.scenario} n={r.n} {r.method:9s} rate={r.rate:.3f} [{r.ci_low:.3f}, {r.ci_high:.3f}]  {r.runtime_s:.2f}s/rep")
    return 0


def cmd_power(cfg: RunConfig) -> int:
    n_grid = cfg.n if isinstance(cfg.n, (list, tuple)) else [cfg.n]
    if any(n < 1 for n in n_grid):
        raise ConfigError("--n entries must be >= 1")
    out = _out_dir(cfg)
    table = _run_study_from(cfg, list(n_grid))
    rates_path = out / "power_rates.csv"
    columns = _write_rates(table, rates_path)
    _write_manifest(
        cfg,
        out,
        outputs={"rates": rates_path.name},
        schemas={rates_path.name: {"columns": columns, "version": SCHEMA_VERSION}},
    )
    for r in table.rows:
        print(f"{r.scenario} n={r.n} {r.method:9s} rate={r.rate:.3f} [{r.ci_low:.3f}, {r.ci_high:.3f}]  {r.runtime_s:.2f}s/rep")
    return 0


def cmd_herd(cfg: RunConfig) -> int:
    kind = _require(cfg, "scenario", "scenario kind")
    n = _positive(cfg, "n")
    m_herd = _positive(cfg, "herd_m")
    reps = _positive(cfg, "reps")
    grid_points = _positive(cfg, "grid_points")
    _positive(cfg, "jobs")
    out = _out_dir(cfg)
    common = dict(
        lam=cfg.get("lam"),
        lambda_grid=tuple(cfg.lambda_grid),
        mc_draws=cfg.mc_draws,
        grid_count=grid_points,
    )
    samples, _, oracle = herding_rep(kind, n, m_herd, child_seed(cfg.seed, 0), **common)
    study = run_herding_study(kind, n, m_herd, reps, cfg.seed, jobs=cfg.jobs, **common)
    outputs, schemas = {}, {}
    for method, draws in samples.items():
        path = out / f"herd_samples_{method}.csv"
        samples_to_csv(draws, path)
        outputs[f"samples_{method}"] = path.name
        schemas[path.name] = {"columns": ["t", "y_tilde"], "version": SCHEMA_VERSION}
    oracle_path = out / "herd_oracle.csv"
    samples_to_csv(oracle, oracle_path)
    outputs["oracle"] = oracle_path.name
    schemas[oracle_path.name] = {"columns": ["t", "y_tilde"], "version": SCHEMA_VERSION}
    dist_path = out / "herd_distances.csv"
    study.to_csv(dist_path)
    outputs["distances"] = dist_path.name
    schemas[dist_path.name] = {
        "columns": ["scenario", "method", "metric", "value", "ci_low", "ci_high"],
        "version": SCHEMA_VERSION,
    }
    _write_manifest(cfg, out, outputs, schemas)
    for r in study.rows:
        print(f"{r.scenario} {r.method:7s} {r.metric:14s} {r.value:.4e} [{r.ci_low:.2e}, {r.ci_high:.2e}]")
    return 0


def cmd_ope(cfg: RunConfig) -> int:
    n = _positive(cfg, "n")
    reps = _positive(cfg, "reps")
    _positive(cfg, "jobs")
    alphas = cfg.alpha if isinstance(cfg.alpha, (list, tuple)) else [cfg.alpha]
    if any(not -1.0 <= a <= 1.0 for a in alphas):
        raise ConfigError("--alpha values must lie in [-1, 1]")
    out = _out_dir(cfg)
    result = run_ope_study(
        alphas=tuple(alphas),
        n=n,
        reps=reps,
        seed=cfg.seed,
        lambda_grid=tuple(cfg.lambda_grid),
        mc_draws=cfg.mc_draws,
        jobs=cfg.jobs,
    )
    mse_path = out / "ope_mse.csv"
    result.to_csv(mse_path)
    _write_manifest(
        cfg,
        out,
        outputs={"mse": mse_path.name},
        schemas={
            mse_path.name: {
                "columns": ["scenario", "method", "metric", "value", "ci_low", "ci_high"],
                "version": SCHEMA_VERSION,
            }
        },
    )
    for r in result.rows:
        print(f"{r.scenario:26s} {r.method:8s} mse={r.value:.4e} [{r.ci_low:.2e}, {r.ci_high:.2e}]")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "test": cmd_test,
    "calibrate": cmd_calibrate,
    "power": cmd_power,
    "herd": cmd_herd,
    "ope": cmd_ope,
}


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = resolve_config(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())

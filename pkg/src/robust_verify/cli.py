"""Command-line experiment runner.

    robust-verify run --config cfg.json --out DIR [--workers N]
    robust-verify report DIR [--svg]
    robust-verify verify --model inn.json --box box.json --objective {max,min,uncertainty}
    robust-verify envs list
"""

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from . import explore as ex
from . import guarantee as gu
from . import inn as innm
from . import verify as vf
from .conformal import SplitConformalRegressor, region_stats
from .envs import ENVIRONMENTS, make_oracle
from .net import NetworkParseError

logger = logging.getLogger("robust_verify")

SEED_ENV_VAR = "ROBUST_VERIFY_SEED"
BETA_PRESETS = {"ablation": [1e-2, 1e-3, 1e-4]}
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        self.field = field_name
        super().__init__(f"config field '{field_name}': {message}")


@dataclass
class RunConfig:
    env: str
    explore: ex.ExploreConfig
    env_options: dict = field(default_factory=dict)
    lam: float = 20.0
    betas: list = field(default_factory=lambda: [1e-3])
    alpha: float = 0.05
    weight_scheme: str = gu.UNIFORM
    alpha_cp: float = 0.05
    cal_fraction: float = 0.5
    n_test: int = 5000
    modes: list = field(default_factory=lambda: [gu.MIXTURE, gu.AMBIENT_UNIFORM])
    seed: int = 0
    seed_source: str = "config"


_TOP_KEYS = {"env", "env_options", "seed", "explore", "lambda", "betas", "alpha",
             "weight_scheme", "alpha_cp", "cal_fraction", "n_test", "modes"}
_EXPLORE_KEYS = {"M", "N", "delta", "k", "hidden_widths", "epochs", "batch_size", "lr",
                 "warm_start", "normalize", "tolerance", "max_nodes", "local_search_starts"}


def _number(obj, key, default, kind=float, positive=True):
    value = obj.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if kind is int and int(value) != value:
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if positive and value <= 0:
        raise ConfigError(key, f"must be positive, got {value!r}")
    if value < 0:
        raise ConfigError(key, f"must be non-negative, got {value!r}")
    return kind(value)


def parse_config(text, seed_override=None):
    """Validate a JSON run configuration; raises :class:`ConfigError`."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"invalid JSON at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigError("<document>", "top level must be an object")
    unknown = set(obj) - _TOP_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    if "env" not in obj:
        raise ConfigError("env", "missing required field")
    env = obj["env"]
    if env not in ENVIRONMENTS:
        raise ConfigError("env", f"unknown environment {env!r}; choose from {sorted(ENVIRONMENTS)}")
    env_options = obj.get("env_options", {})
    if not isinstance(env_options, dict):
        raise ConfigError("env_options", "expected an object")

    seed, source = obj.get("seed", 0), "config"
    if seed_override is not None:
        try:
            seed, source = int(seed_override), f"env:{SEED_ENV_VAR}"
        except ValueError:
            raise ConfigError(SEED_ENV_VAR, f"not an integer: {seed_override!r}") from None
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", f"expected a non-negative integer, got {seed!r}")

    exo = obj.get("explore", {})
    if not isinstance(exo, dict):
        raise ConfigError("explore", "expected an object")
    unknown = set(exo) - _EXPLORE_KEYS
    if unknown:
        raise ConfigError(f"explore.{sorted(unknown)[0]}", "unknown field")
    widths = exo.get("hidden_widths", [50, 50])
    if (not isinstance(widths, list) or not widths
            or not all(isinstance(w, int) and not isinstance(w, bool) and w > 0 for w in widths)):
        raise ConfigError("explore.hidden_widths", "expected a non-empty list of positive integers")
    for flag in ("warm_start", "normalize"):
        if not isinstance(exo.get(flag, True), bool):
            raise ConfigError(f"explore.{flag}", "expected true or false")
    try:
        explore = ex.ExploreConfig(
            M=_number(exo, "M", 20, int, positive=False),
            N=_number(exo, "N", 200, int),
            delta=_number(exo, "delta", 0.05),
            k=_number(exo, "k", 3, int),
            hidden_widths=tuple(widths),
            epochs=_number(exo, "epochs", 100, int),
            batch_size=_number(exo, "batch_size", 64, int),
            lr=_number(exo, "lr", 1e-3),
            warm_start=exo.get("warm_start", True),
            normalize=exo.get("normalize", True),
            tolerance=_number(exo, "tolerance", 1e-4),
            max_nodes=_number(exo, "max_nodes", 200_000, int),
            local_search_starts=_number(exo, "local_search_starts", 4, int),
            seed=seed,
        )
    except ConfigError as exc:
        raise ConfigError(f"explore.{exc.field}", str(exc).split(": ", 1)[1]) from None
    except ValueError as exc:
        raise ConfigError("explore", str(exc)) from None

    betas = obj.get("betas", [1e-3])
    if isinstance(betas, str):
        if betas not in BETA_PRESETS:
            raise ConfigError("betas", f"unknown preset {betas!r}")
        betas = BETA_PRESETS[betas]
    if (not isinstance(betas, list) or not betas
            or not all(isinstance(b, (int, float)) and not isinstance(b, bool) and b > 0
                       for b in betas)):
        raise ConfigError("betas", "expected a non-empty list of positive numbers or a preset name")

    modes = obj.get("modes", [gu.MIXTURE, gu.AMBIENT_UNIFORM])
    if not isinstance(modes, list) or not modes or any(m not in gu.MODES for m in modes):
        raise ConfigError("modes", f"expected a non-empty list drawn from {list(gu.MODES)}")
    scheme = obj.get("weight_scheme", gu.UNIFORM)
    if scheme not in (gu.UNIFORM, gu.VOLUME):
        raise ConfigError("weight_scheme", f"expected 'uniform' or 'volume', got {scheme!r}")

    alpha = _number(obj, "alpha", 0.05)
    alpha_cp = _number(obj, "alpha_cp", 0.05)
    cal_fraction = _number(obj, "cal_fraction", 0.5)
    for name, v in (("alpha", alpha), ("alpha_cp", alpha_cp), ("cal_fraction", cal_fraction)):
        if not 0 < v < 1:
            raise ConfigError(name, f"must lie in (0, 1), got {v!r}")
    return RunConfig(
        env=env, explore=explore, env_options=env_options,
        lam=_number(obj, "lambda", 20.0), betas=[float(b) for b in betas],
        alpha=alpha, weight_scheme=scheme, alpha_cp=alpha_cp, cal_fraction=cal_fraction,
        n_test=_number(obj, "n_test", 5000, int), modes=list(modes),
        seed=seed, seed_source=source,
    )


def _config_echo(cfg):
    e = cfg.explore
    return {
        "env": cfg.env, "env_options": cfg.env_options, "seed": cfg.seed,
        "explore": {"M": e.M, "N": e.N, "delta": e.delta, "k": e.k,
                    "hidden_widths": list(e.hidden_widths), "epochs": e.epochs,
                    "batch_size": e.batch_size, "lr": e.lr, "warm_start": e.warm_start,
                    "normalize": e.normalize, "tolerance": e.tolerance,
                    "max_nodes": e.max_nodes, "local_search_starts": e.local_search_starts},
        "lambda": cfg.lam, "betas": cfg.betas, "alpha": cfg.alpha,
        "weight_scheme": cfg.weight_scheme, "alpha_cp": cfg.alpha_cp,
        "cal_fraction": cfg.cal_fraction, "n_test": cfg.n_test, "modes": cfg.modes,
    }


def _beta_dir(beta):
    return f"beta_{beta:.0e}"


def run_pipeline(cfg, out_dir, workers=1):
    """Explore, certify, evaluate and compare against ICP for every beta.

    Returns the manifest dict; it is also written to ``out_dir/manifest.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": _config_echo(cfg),
        "seed": {"value": cfg.seed, "source": cfg.seed_source},
        "versions": {"robust_verify": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "stages": [],
        "artifacts": [],
        "status": "running",
    }
    oracle = make_oracle(cfg.env, **cfg.env_options)
    rows = []

    def stage(name, beta, fn):
        t0 = time.perf_counter()
        record = {"name": name, "beta": beta}
        try:
            result, paths = fn()
        except Exception as exc:
            record.update(status="failed", seconds=time.perf_counter() - t0,
                          error=f"{type(exc).__name__}: {exc}")
            manifest["stages"].append(record)
            logger.debug("stage %s failed:\n%s", name, traceback.format_exc())
            raise
        record.update(status="ok", seconds=time.perf_counter() - t0,
                      artifacts=[str(p.relative_to(out)) for p in paths])
        manifest["stages"].append(record)
        manifest["artifacts"].extend(record["artifacts"])
        return result

    try:
        for b_index, beta in enumerate(cfg.betas):
            bdir = out / _beta_dir(beta)
            bdir.mkdir(exist_ok=True)
            ecfg = ex.ExploreConfig(**{**cfg.explore.__dict__, "beta": beta, "workers": workers})

            def do_explore():
                res = ex.active_learn(oracle, ecfg)
                paths = [bdir / "inn.json", bdir / "region.json", bdir / "dataset.csv",
                         bdir / "trace.jsonl"]
                innm.save(res.inn, paths[0])
                paths[1].write_text(res.region.to_json())
                ex.write_dataset_csv(paths[2], res.X, res.y)
                ex.write_trace_jsonl(paths[3], res.trace)
                return res, paths

            res = stage("explore", beta, do_explore)
            family = gu.build_family(res.region, cfg.weight_scheme, cfg.alpha, oracle.input_box)

            def do_guarantee():
                bnb = vf.BnbConfig(tolerance=ecfg.tolerance, max_nodes=ecfg.max_nodes,
                                   local_search_starts=ecfg.local_search_starts, seed=cfg.seed)
                rep = gu.performance_lower_bound(res.inn, res.region, cfg.lam, beta, bnb, workers)
                rep.alpha, rep.weight_scheme = cfg.alpha, cfg.weight_scheme
                path = bdir / "guarantee.json"
                path.write_text(json.dumps(rep.to_dict(), indent=2))
                return rep, [path]

            report = stage("guarantee", beta, do_guarantee)

            def do_evaluate():
                # both methods are scored on the same labelled test draws
                icp = SplitConformalRegressor(
                    alpha=cfg.alpha_cp, cal_fraction=cfg.cal_fraction,
                    hidden_widths=ecfg.hidden_widths, epochs=ecfg.epochs,
                    batch_size=ecfg.batch_size, learning_rate=ecfg.lr,
                    input_box=oracle.input_box if ecfg.normalize else None,
                    random_state=cfg.seed,
                ).fit(res.X, res.y)
                stats = []
                for m_index, mode in enumerate(cfg.modes):
                    rng = np.random.default_rng([cfg.seed, 99, b_index, m_index])
                    X, y = gu.draw_labeled(oracle, family, cfg.n_test, rng, mode, workers)
                    stats.append(gu.interval_stats(res.inn, X, y, cfg.lam, beta, mode,
                                                   report.epsilon))
                    stats.append(region_stats(icp.predictor_, X, y, mode))
                path = bdir / "coverage.json"
                path.write_text(json.dumps({"icp_quantile": icp.quantile_,
                                            "stats": [s.to_dict() for s in stats]}, indent=2))
                return stats, [path]

            for s in stage("evaluate", beta, do_evaluate):
                rows.append(s.row(cfg.env, beta, cfg.lam))
    except Exception:
        manifest["status"] = "failed"
    else:
        manifest["status"] = "ok"
    csv_path = out / "coverage.csv"
    csv_path.write_text(gu.format_coverage_csv(rows))
    manifest["artifacts"].append("coverage.csv")
    manifest["coverage_csv"] = "coverage.csv"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def _read_manifest(run_dir):
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {run_dir}")
    return json.loads(path.read_text())


def build_report(run_dir, svg=False):
    """Check a run directory and write ``report.txt``/``report.csv`` (and
    ``report.svg``). Returns the text table."""
    run_dir = Path(run_dir)
    manifest = _read_manifest(run_dir)
    missing = [a for a in manifest.get("artifacts", []) if not (run_dir / a).exists()]
    if missing:
        raise FileNotFoundError("missing artifacts: " + ", ".join(missing))
    with open(run_dir / manifest.get("coverage_csv", "coverage.csv"), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader]
    if tuple(header) != gu.COVERAGE_COLUMNS:
        raise ValueError(f"unexpected coverage header {header}")
    with open(run_dir / "report.csv", "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    for st in manifest.get("stages", []):
        if st.get("status") != "ok":
            lines.append(f"stage {st['name']} (beta={st.get('beta')}) failed: {st.get('error')}")
    text = "\n".join(lines) + "\n"
    (run_dir / "report.txt").write_text(text)
    if svg:
        (run_dir / "report.svg").write_text(_trace_svg(run_dir, manifest))
    return text


def _polyline(values, x0, y0, w, h):
    vals = [v for v in values if v is not None]
    if not vals:
        return ""
    lo, hi = min(vals), max(vals)
    span = hi - lo or 1.0
    n = max(len(values) - 1, 1)
    pts = [f"{x0 + w * i / n:.2f},{y0 + h - h * (v - lo) / span:.2f}"
           for i, v in enumerate(values) if v is not None]
    return " ".join(pts)


def _trace_svg(run_dir, manifest):
    """Final-epoch loss and certified uncertainty per active-learning round."""
    panels = []
    for beta in manifest["config"]["betas"]:
        path = Path(run_dir) / _beta_dir(beta) / "trace.jsonl"
        if not path.exists():
            continue
        recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        panels.append((beta, [r["epoch_losses"][-1] for r in recs], [r["u_hi"] for r in recs]))
    W, H, pad = 360, 200, 30
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * W}" '
             f'height="{H * max(len(panels), 1)}">']
    for row, (beta, losses, unc) in enumerate(panels):
        y0 = row * H
        for col, (title, vals, colour) in enumerate(
                (("final loss", losses, "#1f77b4"), ("certified U", unc, "#d62728"))):
            x0 = col * W
            parts.append(f'<text x="{x0 + pad}" y="{y0 + 18}" font-size="12">'
                         f'{escape(title)} (beta={beta:g})</text>')
            parts.append(f'<rect x="{x0 + pad}" y="{y0 + pad}" width="{W - 2 * pad}" '
                         f'height="{H - 2 * pad}" fill="none" stroke="#999"/>')
            pts = _polyline(vals, x0 + pad, y0 + pad, W - 2 * pad, H - 2 * pad)
            if pts:
                parts.append(f'<polyline fill="none" stroke="{colour}" points="{pts}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def run_verify(model_path, box_path, objective, tol, max_nodes):
    model = innm.load(model_path)
    box = vf.Box.from_dict(json.loads(Path(box_path).read_text()))
    cfg = vf.BnbConfig(tolerance=tol, max_nodes=max_nodes)
    solver = {"max": vf.maximize_phi_upper, "min": vf.minimize_phi_lower,
              "uncertainty": vf.maximize_uncertainty}[objective]
    return solver(model, box, cfg).to_dict(objective, box)


def _build_parser():
    parser = argparse.ArgumentParser(prog="robust-verify", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("report", help="summarise a run directory")
    p.add_argument("run_dir")
    p.add_argument("--svg", action="store_true", help="also write report.svg")

    p = sub.add_parser("verify", help="certified optimisation of a saved model over a box")
    p.add_argument("--model", required=True)
    p.add_argument("--box", required=True)
    p.add_argument("--objective", choices=["max", "min", "uncertainty"], required=True)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-nodes", type=int, default=200_000)
    p.add_argument("--out")

    p = sub.add_parser("envs", help="environment registry")
    p.add_argument("action", choices=["list"])
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "envs":
        for name in sorted(ENVIRONMENTS):
            box = make_oracle(name).input_box
            print(f"{name:12s} X0 = {box.lo.tolist()} .. {box.hi.tolist()}")
        return EXIT_OK

    if args.command == "run":
        if args.workers < 1:
            print("error: --workers must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        try:
            text = Path(args.config).read_text()
            cfg = parse_config(text, os.environ.get(SEED_ENV_VAR))
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        manifest = run_pipeline(cfg, args.out, args.workers)
        if manifest["status"] != "ok":
            failed = [s for s in manifest["stages"] if s["status"] != "ok"]
            for s in failed:
                print(f"error: stage {s['name']} failed: {s['error']}", file=sys.stderr)
            return EXIT_FAILURE
        print(Path(args.out) / "coverage.csv")
        return EXIT_OK

    if args.command == "report":
        try:
            print(build_report(args.run_dir, args.svg), end="")
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAILURE
        return EXIT_OK

    if args.command == "verify":
        try:
            record = run_verify(args.model, args.box, args.objective, args.tol, args.max_nodes)
        except (OSError, NetworkParseError, ValueError, KeyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAILURE
        text = json.dumps(record, indent=2)
        if args.out:
            Path(args.out).write_text(text + "\n")
        print(text)
        return EXIT_OK
    return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Commands: ``reproduce``, ``check``, ``simulate``, ``fit``, ``predict`` and
``replay``.  Settings resolve as flag > ``ZEROCRED_*`` environment variable >
``--config`` file (YAML or JSON) > default, and every command writes a
``manifest.json`` holding the resolved settings, which ``replay`` re-runs.

Exit codes: 0 success, 1 internal error, 2 strict-tolerance failure,
3 violations found, 64 usage error, 65 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional

import yaml

from . import __version__, dists, experiments, fit, models, orders, posterior
from .errors import DataError, DiagnosticError, UsageError, ZeroCredError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_STRICT = 2
EXIT_VIOLATIONS = 3
EXIT_USAGE = 64
EXIT_DATA = 65

ENV_PREFIX = "ZEROCRED_"

# name -> (type, default); flags default to None so the source can be resolved
SETTINGS = {
    "seed": (int, 0),
    "method": (str, None),
    "nodes": (int, 64),
    "S": (int, 1000),
    "R": (int, 100),
    "burn_in": (int, 500),
    "thin": (int, 1),
    "workers": (int, os.cpu_count() or 1),
    "out": (str, "runs"),
    "strict": (bool, False),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off", ""):
        return False
    raise UsageError(f"cannot read {text!r} as a boolean")


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path!r}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)  # JSON is a subset of YAML
    except yaml.YAMLError as exc:
        raise UsageError(f"malformed config {path!r}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path!r} must be a mapping at the top level")
    return data


def _resolve(args, config: dict) -> dict:
    """Resolve the shared settings: flag > environment > config file > default."""
    method_cfg = config.get("method", {}) or {}
    if not isinstance(method_cfg, dict):
        raise UsageError("config key 'method' must be a mapping")
    out = {}
    for name, (typ, default) in SETTINGS.items():
        flag = getattr(args, name, None)
        env = os.environ.get(ENV_PREFIX + name.upper())
        if flag is not None and flag is not False:
            val = flag
        elif env is not None:
            val = env
        elif name in method_cfg:
            val = method_cfg[name]
        elif name in config and not isinstance(config[name], dict):
            val = config[name]
        else:
            val = default
        if val is not None:
            try:
                val = _parse_bool(val) if typ is bool else typ(val)
            except (TypeError, ValueError):
                raise UsageError(f"setting {name!r}: cannot convert {val!r} to {typ.__name__}") \
                    from None
        out[name] = val
    return out


def _mcmc_cfg(s: dict) -> posterior.MCMCConfig:
    return posterior.MCMCConfig(draws=s["S"], burn_in=s["burn_in"], thin=s["thin"],
                                runs=s["R"], seed=s["seed"])


def _write_manifest(out: Path, command: str, settings: dict, extra: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    man = {"tool": "zerocred", "version": __version__, "command": command,
           "settings": settings, **extra}
    path = out / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# Model configuration
# --------------------------------------------------------------------------


def _get(d: dict, key: str, where: str, typ=float, default=None, required=True):
    if key not in d:
        if required and default is None:
            raise UsageError(f"config key '{where}.{key}' is required")
        return default
    try:
        return typ(d[key])
    except (TypeError, ValueError):
        raise UsageError(f"config key '{where}.{key}': cannot read {d[key]!r} as "
                         f"{typ.__name__}") from None


def build_spec(block: Optional[dict]) -> models.ModelSpec:
    """Build a model spec from a ``model`` config mapping."""
    block = dict(block or {"family": "comono_hurdle"})
    fam = block.get("family")
    if fam not in models.FAMILIES:
        raise UsageError(f"config key 'model.family': unknown family {fam!r}; expected one of "
                         f"{sorted(models.FAMILIES)}")
    law = block.get("law", {}) or {}
    if not isinstance(law, dict):
        raise UsageError("config key 'model.law' must be a mapping")
    w = "model.law"
    try:
        if fam in ("gauss_hurdle", "gauss_zip"):
            lw = dists.BivariateNormal(_get(law, "mu1", w, default=0.0), _get(law, "mu2", w, default=0.0),
                                       _get(law, "var1", w, default=1.0), _get(law, "var2", w, default=1.0),
                                       _get(law, "rho", w, default=0.0, required=False) or 0.0)
            return models.FAMILIES[fam](lw)
        if fam == "conj_hurdle":
            lw = dists.BetaGamma(*(_get(law, k, w) for k in ("a", "b", "alpha", "beta")))
            return models.ConjHurdle(lw)
        lw = dists.ScalarNormal(_get(law, "mean", w, default=0.0, required=False) or 0.0,
                                _get(law, "var", w, default=1.0))
        if fam == "poisson_mixed":
            return models.PoissonMixed(lw, _get(block, "log_rate", "model", default=0.0,
                                                required=False) or 0.0)
        c_seq = tuple(block.get("c_seq", (0.0,)))
        d_seq = tuple(block.get("d_seq", (0.0,)))
        if fam == "nb_hurdle":
            return models.NBHurdle(lw, dists.SOFTPLUS, c_seq, d_seq,
                                   r=_get(block, "r", "model", default=1.0))
        link = dists.get_link(str(block.get("link", "softplus")))
        return models.FAMILIES[fam](lw, link, c_seq, d_seq)
    except UsageError:
        raise
    except (ValueError, TypeError) as exc:
        raise UsageError(f"config key '{w}': {exc}") from None


def _parse_counts(text: str, what: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip() != "")
    except ValueError:
        raise UsageError(f"{what}: cannot parse counts from {text!r}") from None


def _parse_pair(text: str) -> tuple:
    lo, sep, hi = text.partition(":")
    if not sep:
        raise UsageError(f"--pair expects LOW:HIGH, got {text!r}")
    return _parse_counts(lo, "--pair"), _parse_counts(hi, "--pair")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_reproduce(args, s: dict, config: dict) -> int:
    ids = list(experiments.TABLE_IDS) if args.table in (None, "all") else [args.table]
    for tid in ids:
        if tid not in experiments.TABLES:
            raise UsageError(f"unknown table id {tid!r}; expected one of "
                             f"{list(experiments.TABLE_IDS)} or 'all'")
    method = s["method"] or posterior.QUADRATURE
    out = Path(s["out"])
    strict_ok = True
    for tid in ids:
        cond = tuple(experiments.TABLES[tid].conditioning)
        if tid == "C1_rho" and args.caption_conditioning:
            cond = (0, 1)
        job = experiments.TableJob(tid, method=method, cfg=_mcmc_cfg(s), seed=s["seed"],
                                   nodes=s["nodes"], conditioning=cond)
        res = experiments.run_table(job, workers=s["workers"])
        experiments.write_table(res, out)
        chk = res.reference_check()
        line = f"{tid}: {len(res.rows)} rows"
        if chk is not None:
            line += f", {chk['n_within']}/{chk['n_checked']} within published tolerance"
            if chk["fraction_within"] < 0.9:
                strict_ok = False
        print(line)
    _write_manifest(out, "reproduce", s, {"args": {"table": args.table or "all",
                                                   "caption_conditioning":
                                                       bool(args.caption_conditioning)}})
    if s["strict"] and not strict_ok:
        print("strict: published tolerance not met", file=sys.stderr)
        return EXIT_STRICT
    return EXIT_OK


def cmd_check(args, s: dict, config: dict) -> int:
    spec = build_spec(config.get("model"))
    order = args.order or config.get("order", "base")
    transform = args.transform or config.get("transform")
    method = s["method"] or (posterior.CONJUGATE if isinstance(spec, models.ConjHurdle)
                             else posterior.QUADRATURE)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    if args.pair:
        histories = [_parse_pair(p) for p in args.pair]
        where = {"pairs": [[list(a), list(b)] for a, b in histories]}
    else:
        lat = args.lattice or config.get("lattice", "3,4")
        t, y_max = _parse_counts(str(lat), "--lattice")
        histories = orders.LatticeSpec(t, y_max)
        where = {"lattice": [t, y_max]}
    if order in ("base", "general"):
        h = posterior.Identity() if order == "base" else posterior.parse_transform(
            transform or "identity")
        rep = orders.check_general_order(spec, h, histories, method, _mcmc_cfg(s),
                                         nodes=s["nodes"])
        (out / "report.json").write_text(rep.to_json(indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
        (out / "report.csv").write_text(rep.to_csv(), encoding="utf-8", newline="")
        n_bad, summary = rep.n_violations, rep.summary()
    elif order == "lr":
        pairs = orders._pairs_from(histories)
        results = []
        for lo, hi in pairs:
            r = orders.predictive_lr_check(spec, lo, hi, method, s["nodes"])
            results.append({"history_low": list(lo), "history_high": list(hi),
                            "holds": r.holds, "inconclusive": r.inconclusive,
                            "first_violation": r.first_violation})
        n_bad = sum(not r["holds"] and not r["inconclusive"] for r in results)
        n_inc = sum(r["inconclusive"] for r in results)
        (out / "report.json").write_text(json.dumps({"order": "lr", "comparisons": results},
                                                    indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
        summary = f"{len(results)} LR comparisons, {n_bad} violations, {n_inc} inconclusive"
    else:
        raise UsageError(f"unknown order {order!r}; expected base, general or lr")
    _write_manifest(out, "check", s, {"args": {"order": order, "transform": transform,
                                               "method": method, **where},
                                      "model": config.get("model")})
    print(summary)
    return EXIT_VIOLATIONS if n_bad else EXIT_OK


def cmd_simulate(args, s: dict, config: dict) -> int:
    family = args.family or config.get("family", "comono")
    if family not in fit.MCMC_FAMILIES:
        raise UsageError(f"unknown family {family!r}; expected one of {fit.MCMC_FAMILIES}")
    design = args.design or config.get("design", "categorical")
    k = args.k if args.k is not None else int(config.get("k", 500))
    T = args.T if args.T is not None else int(config.get("T", 6))
    panel = fit.synth_panel(k, T, family, config.get("params"), design, seed=s["seed"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    panel.to_csv(out / "panel.csv")
    (out / "truth.json").write_text(json.dumps(panel.truth, sort_keys=True) + "\n",
                                    encoding="utf-8")
    _write_manifest(out, "simulate", s, {"args": {"family": family, "design": design,
                                                  "k": k, "T": T,
                                                  "params": config.get("params")}})
    print(f"simulated {k} entities x {T} periods ({family}, {design}) -> {out / 'panel.csv'}")
    return EXIT_OK


def _read_panel(path) -> fit.PanelDataset:
    if not path:
        raise UsageError("--data is required")
    if not Path(path).exists():
        raise UsageError(f"no such file: {path}")
    return fit.PanelDataset.from_csv(path)


def cmd_fit(args, s: dict, config: dict) -> int:
    family = args.family or config.get("family", "comono")
    panel = _read_panel(args.data)
    if args.train_periods:
        panel = panel.subset_periods(args.train_periods)
    if family in fit.MCMC_FAMILIES:
        res = fit.fit_mcmc(panel, family, _mcmc_cfg(s), dists.make_rng(s["seed"]))
    elif family in fit.MLE_FAMILIES:
        res = fit.fit_mle(panel, family)
    else:
        raise UsageError(f"unknown family {family!r}; expected one of "
                         f"{fit.MCMC_FAMILIES + fit.MLE_FAMILIES}")
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "fit.json").write_text(res.to_json(indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if res.method == "mcmc":
        lines = ["block,parameter_index,acceptance"]
        for i, a in enumerate(res.diagnostics["acceptance"]["global"]):
            lines.append(f"global,{i},{a!r}")
        for i, a in enumerate(res.diagnostics["acceptance"]["entity"]):
            lines.append(f"entity,{i},{a!r}")
        (out / "diagnostics.csv").write_text("\r\n".join(lines) + "\r\n", encoding="utf-8",
                                             newline="")
    _write_manifest(out, "fit", s, {"args": {"family": family, "data": args.data,
                                             "train_periods": args.train_periods}})
    print(f"fitted {family} on {panel.k} entities -> {out / 'fit.json'}")
    return EXIT_OK


def cmd_predict(args, s: dict, config: dict) -> int:
    if not args.fit:
        raise UsageError("--fit is required")
    try:
        res = fit.FitResult.from_json(Path(args.fit).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
        raise DataError(f"cannot read fit result {args.fit!r}: {exc}") from None
    panel = _read_panel(args.data)
    if args.holdout:
        train = panel
        if not Path(args.holdout).exists():
            raise UsageError(f"no such file: {args.holdout}")
        hold = fit.PanelDataset.from_csv(args.holdout, first_period=None)
    else:
        train, hold = fit.split_last_period(panel)
    known = set(train.entities)
    for i, e in enumerate(hold.frame["entity"]):
        if e not in known:
            row = int(hold.source_rows[i]) if hold.source_rows is not None else i + 1
            raise DataError(f"holdout entity {e!r} is not in the training data", row=row,
                            column="entity")
    mse, pred = fit.predict_oos(res, train, hold, nodes=s["nodes"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    pred.to_csv(out / "predictions.csv", index=False, lineterminator="\r\n", float_format="%.17g")
    (out / "summary.json").write_text(json.dumps({"mse": mse, "family": res.family,
                                                  "n": int(len(pred))}, sort_keys=True) + "\n",
                                      encoding="utf-8")
    _write_manifest(out, "predict", s, {"args": {"fit": args.fit, "data": args.data,
                                                 "holdout": args.holdout}})
    print(f"MSE {mse:.6f} over {len(pred)} entities")
    return EXIT_OK


COMMANDS = {"reproduce": cmd_reproduce, "check": cmd_check, "simulate": cmd_simulate,
            "fit": cmd_fit, "predict": cmd_predict}


def cmd_replay(args) -> int:
    """Re-run a command from its manifest, optionally into a different directory."""
    try:
        man = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        command, settings, margs = man["command"], dict(man["settings"]), dict(man.get("args", {}))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest!r}: {exc}") from None
    if command not in COMMANDS:
        raise UsageError(f"manifest names unknown command {command!r}")
    if args.out:
        settings["out"] = args.out
    ns = argparse.Namespace(**_command_defaults(command))
    config = {}
    if command == "reproduce":
        ns.table = margs.get("table")
        ns.caption_conditioning = margs.get("caption_conditioning", False)
    elif command == "check":
        ns.order, ns.transform = margs.get("order"), margs.get("transform")
        ns.pair = [f"{','.join(map(str, a))}:{','.join(map(str, b))}"
                   for a, b in margs.get("pairs", [])] or None
        ns.lattice = ",".join(map(str, margs["lattice"])) if "lattice" in margs else None
        config = {"model": man.get("model")} if man.get("model") else {}
        settings["method"] = margs.get("method", settings.get("method"))
    else:
        for key, val in margs.items():
            setattr(ns, key, val)
        if command == "simulate" and margs.get("params") is not None:
            config = {"params": margs["params"]}
    return COMMANDS[command](ns, settings, config)


def _command_defaults(command):
    return {"reproduce": {"table": None, "caption_conditioning": False},
            "check": {"order": None, "transform": None, "pair": None, "lattice": None},
            "simulate": {"family": None, "design": None, "k": None, "T": None},
            "fit": {"family": None, "data": None, "train_periods": None},
            "predict": {"fit": None, "data": None, "holdout": None}}[command]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--method", choices=list(posterior.METHODS))
    common.add_argument("--nodes", type=int, help="quadrature nodes per dimension")
    common.add_argument("--S", type=int, dest="S", help="MCMC draws per run")
    common.add_argument("--R", type=int, dest="R", help="independent MCMC runs")
    common.add_argument("--burn-in", type=int, dest="burn_in")
    common.add_argument("--thin", type=int)
    common.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--strict", action="store_true", default=None,
                        help="exit 2 when published tolerances are not met")

    p = _Parser(prog="zerocred", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"zerocred {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("reproduce", parents=[common], help="reproduce a published table")
    r.add_argument("--table", help=f"one of {', '.join(experiments.TABLE_IDS)} or 'all'")
    r.add_argument("--caption-conditioning", action="store_true",
                   help="C1_rho: condition on Y1 = 0 vs 1 instead of 1 vs 2")

    c = sub.add_parser("check", parents=[common], help="check a credibility or LR order")
    c.add_argument("--order", choices=["base", "general", "lr"])
    c.add_argument("--transform", help="identity, deductible:D or limit:D")
    c.add_argument("--pair", action="append", help="LOW:HIGH comma-separated histories")
    c.add_argument("--lattice", help="T,YMAX (default 3,4)")

    s = sub.add_parser("simulate", parents=[common], help="simulate a synthetic panel")
    s.add_argument("--family", choices=list(fit.MCMC_FAMILIES))
    s.add_argument("--design", choices=sorted(fit.DESIGNS))
    s.add_argument("--k", type=int)
    s.add_argument("--T", type=int, dest="T")

    f = sub.add_parser("fit", parents=[common], help="fit a family to a panel CSV")
    f.add_argument("--family", choices=list(fit.MCMC_FAMILIES + fit.MLE_FAMILIES))
    f.add_argument("--data")
    f.add_argument("--train-periods", type=int, dest="train_periods")

    pr = sub.add_parser("predict", parents=[common], help="out-of-sample prediction")
    pr.add_argument("--fit")
    pr.add_argument("--data", help="training panel (last period is held out without --holdout)")
    pr.add_argument("--holdout")

    rp = sub.add_parser("replay", help="re-run a command from its manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join([*COMMANDS, "replay"]))
        if args.command == "replay":
            return cmd_replay(args)
        config = _load_config(args.config)
        settings = _resolve(args, config)
        return COMMANDS[args.command](args, settings, config)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DiagnosticError, ZeroCredError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers everything
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

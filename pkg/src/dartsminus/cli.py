"""Command line entry point.

    dartsminus [--config FILE] [--set key=value ...] [--out DIR] COMMAND ...

Commands: ``search``; ``diag {hessian,landscape,lambda,resnet-beta,gradflow}``;
``bench {build,eval,report}``; ``genotype {derive,show}``. The output
directory defaults to ``./out`` and can be overridden with the
``DARTSMINUS_OUT`` environment variable (``--out`` wins over both).
"""

from __future__ import annotations

import argparse
import dataclasses
import csv
import hashlib
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, apply_overrides, parse_config
from .diagnostics import (
    gradient_flow_check,
    hessian_max_eig,
    lambda_proxy,
    landscape_probe,
    resnet_beta_demo,
)
from .genotype import GenotypeParseError, derive_genotype, parse_genotype, serialize_genotype
from .minibench import (
    BenchTable,
    SearchReport,
    SeedRow,
    build_table,
    evaluate_search,
    format_report,
    genotype_key,
    lookup,
    percentile,
)
from .search import load_state, run_search, state_json, trajectory_csv, validation_split

log = logging.getLogger("dartsminus")

OUT_ENV = "DARTSMINUS_OUT"


class CliError(Exception):
    """Reported on stderr with exit code 2."""


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.dump().encode("utf-8")).hexdigest()[:16]


def header_lines(cfg: RunConfig, spec_hash: str | None = None) -> list[str]:
    return [
        f"dartsminus {__version__}",
        f"spec_hash={spec_hash or config_hash(cfg)}",
        f"seed={cfg['seed']}",
    ]


def with_header(cfg: RunConfig, body: str, spec_hash: str | None = None) -> str:
    return "".join(f"# {h}\n" for h in header_lines(cfg, spec_hash)) + body


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    log.info("wrote %s", path)
    return path


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _r(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_search(cfg: RunConfig, out: Path, args) -> int:
    config = cfg.search()
    data = cfg.dataset().generate()
    result = run_search(config, data, log=log.info)
    k = cfg.k()
    _write(out / "trajectory.csv", with_header(cfg, trajectory_csv(result)))
    for name, arch in (("final", result.final_arch), ("best", result.best_arch)):
        g = derive_genotype(arch, config.space, k)
        _write(out / f"genotype_{name}.txt", with_header(cfg, serialize_genotype(g)))
    _write(out / "config.txt", with_header(cfg, cfg.dump()))
    header = dict(line.split("=", 1) if "=" in line else ("tool", line) for line in header_lines(cfg))
    _write(out / "state.json", state_json(result, config, header))
    return 0


def _state(args, out: Path):
    path = Path(args.state) if args.state else out / "state.json"
    if not path.is_file():
        raise CliError(f"no saved search state at {path}; run 'dartsminus search' first")
    return path, load_state(path.read_text(encoding="utf-8"))


def _diag_data(cfg: RunConfig, st):
    return validation_split(cfg.dataset().generate(), st.seed, st.split_ratio)


def cmd_diag(cfg: RunConfig, out: Path, args) -> int:
    what = args.diag
    if what == "hessian":
        _, st = _state(args, out)
        xv, yv = _diag_data(cfg, st)
        n = cfg["search.hessian_samples"]
        est = hessian_max_eig(
            st.net, st.final_arch, xv[:n], yv[:n], st.beta,
            iters=cfg["diag.hessian_iters"], tol=cfg["diag.hessian_tol"], seed=cfg["seed"],
        )
        body = _csv(
            ["state", "max_eig", "residual", "iterations", "converged", "samples"],
            [["final", _r(est.value), _r(est.residual), est.iterations, est.converged, min(n, len(yv))]],
        )
        _write(out / "hessian.csv", with_header(cfg, body))
        return 0 if est.converged else 1
    if what == "landscape":
        _, st = _state(args, out)
        xv, yv = _diag_data(cfg, st)
        radius = cfg["diag.radius"] if args.radius is None else args.radius
        res = cfg["diag.resolution"] if args.resolution is None else args.resolution
        grid = landscape_probe(st.net, st.final_arch, xv, yv, st.beta, radius, res, cfg["seed"])
        _write(out / "landscape.csv", with_header(cfg, grid.to_csv()))
        return 0
    if what == "lambda":
        h = cfg["diag.lambda_h"] if args.h is None else args.h
        beta = cfg["diag.lambda_beta"] if args.beta is None else args.beta
        c, s = cfg["diag.lambda_conv"], cfg["diag.lambda_skip"]
        conv = np.full((h, h), c)
        skip = np.full((h, h), s)
        value = lambda_proxy(conv, skip, beta, h)
        body = _csv(["h", "beta", "conv", "skip", "lambda"], [[h, _r(beta), _r(c), _r(s), _r(value)]])
        _write(out / "lambda.csv", with_header(cfg, body))
        return 0
    if what == "resnet-beta":
        init = cfg["diag.resnet_init"] if args.init is None else args.init
        epochs = cfg["diag.resnet_epochs"] if args.epochs is None else args.epochs
        trace = resnet_beta_demo(
            init, depth=cfg["diag.resnet_depth"], epochs=epochs, seed=cfg["seed"],
            dataset=dataclasses.replace(cfg.dataset(), samples_per_class=cfg["diag.resnet_samples"]),
        )
        rows = [[e + 1, _r(b), _r(l)] for e, (b, l) in enumerate(zip(trace.betas, trace.losses))]
        _write(out / "resnet_beta.csv", with_header(cfg, _csv(["epoch", "beta", "loss"], rows)))
        return 0
    if what == "gradflow":
        depth = cfg["diag.gradflow_depth"] if args.depth is None else args.depth
        beta = cfg["diag.gradflow_beta"] if args.beta is None else args.beta
        err = gradient_flow_check(depth, beta, seed=cfg["seed"])
        body = _csv(["depth", "beta", "max_rel_error"], [[depth, _r(beta), _r(err)]])
        _write(out / "gradflow.csv", with_header(cfg, body))
        return 0
    raise CliError(f"unknown diag command {what!r}")


def _table_path(args, out: Path) -> Path:
    return Path(args.table) if getattr(args, "table", None) else out / "table.txt"


def _load_table(cfg: RunConfig, args, out: Path) -> BenchTable:
    path = _table_path(args, out)
    if not path.is_file():
        raise CliError(f"no benchmark table at {path}; run 'dartsminus bench build' first")
    spec = cfg.bench()
    table = BenchTable.from_text(path.read_text(encoding="utf-8"), spec.space, spec.k)
    if table.spec_hash != spec.spec_hash():
        raise CliError(
            f"table {path} was built for spec {table.spec_hash}, the config gives "
            f"{spec.spec_hash()}; rebuild it or use the matching config"
        )
    return table


def _method_name(cfg: RunConfig) -> str:
    return "darts" if cfg["decay.beta0"] == 0 else "darts-minus"


_EVAL_COLS = ["seed", "genotype", "accuracy", "rank", "percentile", "num_parametric", "num_skips"]


def cmd_bench(cfg: RunConfig, out: Path, args) -> int:
    what = args.bench
    if what == "build":
        spec = cfg.bench()
        table = build_table(spec, log=log.info)
        _write(_table_path(args, out), table.to_text())
        return 0
    if what == "eval":
        table = _load_table(cfg, args, out)
        spec = cfg.bench()
        name = args.name or _method_name(cfg)
        report = evaluate_search(
            name, cfg.search(), table, spec, cfg["bench.eval_seeds"], cfg["bench.use"], log.info
        )
        rows = [
            [r.seed, r.genotype, _r(r.accuracy), r.rank, _r(r.percentile), r.num_parametric, r.num_skips]
            for r in report.rows
        ]
        body = f"# method={name}\n" + _csv(_EVAL_COLS, rows)
        _write(out / f"eval_{name}.csv", with_header(cfg, body, spec.spec_hash()))
        return 0
    if what == "report":
        files = sorted(out.glob("eval_*.csv"))
        if not files:
            raise CliError(f"no eval_*.csv files in {out}; run 'dartsminus bench eval' first")
        reports = [_read_eval(p) for p in files]
        reports.sort(key=lambda r: (r.name != "darts", r.name))
        _write(out / "report.txt", with_header(cfg, format_report(reports), cfg.bench().spec_hash()))
        sys.stdout.write(format_report(reports))
        return 0
    raise CliError(f"unknown bench command {what!r}")


def _read_eval(path: Path) -> SearchReport:
    name = path.stem[len("eval_") :]
    lines = [l for l in path.read_text(encoding="utf-8").splitlines() if not l.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append(
            SeedRow(
                int(rec["seed"]),
                rec["genotype"],
                float(rec["accuracy"]),
                int(rec["rank"]),
                float(rec["percentile"]),
                int(rec["num_parametric"]),
                int(rec["num_skips"]),
            )
        )
    return SearchReport(name, rows)


def cmd_genotype(cfg: RunConfig, out: Path, args) -> int:
    if args.genotype == "derive":
        _, st = _state(args, out)
        arch = st.best_arch if args.use == "best" else st.final_arch
        g = derive_genotype(arch, st.net.space, cfg.k())
        text = with_header(cfg, serialize_genotype(g))
        if args.output:
            _write(Path(args.output), text)
        else:
            sys.stdout.write(text)
        return 0
    if args.genotype == "show":
        path = Path(args.file)
        if not path.is_file():
            raise CliError(f"genotype file {path} does not exist")
        try:
            g = parse_genotype(path.read_text(encoding="utf-8"))
        except GenotypeParseError as exc:
            raise CliError(f"{path}: {exc}") from None
        sys.stdout.write(serialize_genotype(g))
        if args.table:
            table = _load_table(cfg, args, out)
            acc, rank = lookup(table, g)
            sys.stdout.write(
                f"# accuracy={acc!r} rank={rank}/{len(table)} percentile={percentile(table, g)!r}\n"
            )
            sys.stdout.write(f"# key={genotype_key(g.full(cfg.space()))}\n")
        return 0
    raise CliError(f"unknown genotype command {args.genotype!r}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dartsminus", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"dartsminus {__version__}")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("search", help="run one architecture search")

    d = sub.add_parser("diag", help="collapse diagnostics")
    dsub = d.add_subparsers(dest="diag", required=True)
    for name in ("hessian", "landscape"):
        q = dsub.add_parser(name)
        q.add_argument("--state", help="saved search state (default OUT/state.json)")
        if name == "landscape":
            q.add_argument("--radius", type=float)
            q.add_argument("--resolution", type=int)
    q = dsub.add_parser("lambda")
    q.add_argument("--beta", type=float)
    q.add_argument("--h", type=int)
    q = dsub.add_parser("resnet-beta")
    q.add_argument("--init", type=float)
    q.add_argument("--epochs", type=int)
    q = dsub.add_parser("gradflow")
    q.add_argument("--depth", type=int)
    q.add_argument("--beta", type=float)

    b = sub.add_parser("bench", help="tabular benchmark")
    bsub = b.add_subparsers(dest="bench", required=True)
    q = bsub.add_parser("build")
    q.add_argument("--table", help="table path (default OUT/table.txt)")
    q = bsub.add_parser("eval")
    q.add_argument("--table", help="table path (default OUT/table.txt)")
    q.add_argument("--name", help="method name (default from decay.beta0)")
    bsub.add_parser("report")

    g = sub.add_parser("genotype", help="derive or inspect genotypes")
    gsub = g.add_subparsers(dest="genotype", required=True)
    q = gsub.add_parser("derive")
    q.add_argument("--state", help="saved search state (default OUT/state.json)")
    q.add_argument("--use", choices=("best", "final"), default="best")
    q.add_argument("--output", help="write here instead of stdout")
    q = gsub.add_parser("show")
    q.add_argument("file")
    q.add_argument("--table", help="also look the genotype up in this table")
    return p


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file {p} does not exist")
        try:
            cfg = parse_config(p.read_text(encoding="utf-8"))
        except ConfigError as exc:
            raise CliError(f"{p}: {exc}") from None
    return apply_overrides(cfg, overrides)


COMMANDS = {"search": cmd_search, "diag": cmd_diag, "bench": cmd_bench, "genotype": cmd_genotype}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config, args.set)
        out = Path(args.out or os.environ.get(OUT_ENV) or "out")
        return COMMANDS[args.command](cfg, out, args)
    except (CliError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

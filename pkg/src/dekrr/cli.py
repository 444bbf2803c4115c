"""Config-driven experiment runner.

Config files hold one ``key = value`` per line; ``#`` starts a comment.
Relative paths resolve against the config file's directory.

Subcommands::

    dekrr run <config> [--out DIR] [--force] [--seed-offset K]
    dekrr sweep <config> --dbar 20,40,70 --methods dkla_rff,dekrr_ddrf
    dekrr verify <dir>
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import shutil
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from dekrr.dataset import Dataset, load_table, make_partition, normalize, split_train_test
from dekrr.evaluation import METHODS, MethodConfig, run_baseline
from dekrr.graph import Topology, load_edge_list, ring_lattice
from dekrr.simulator import allocate_features, comm_cost

log = logging.getLogger("dekrr")

RESULT_FIELDS = ("dataset", "method", "Dbar", "seed", "rse", "comm_scalars", "rounds")
SWEEP_FIELDS = ("Dbar", "method", "mean_rse", "std_rse", "comm_per_round")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    J: int
    lam: float
    sigma: float
    seeds: tuple[int, ...]
    Dbar: int | None = None
    D_list: tuple[int, ...] | None = None
    format: str = "csv"
    target: str = "target"
    n_features: int | None = None
    degree: int = 4
    edge_list: str | None = None
    partition: str = "noniid_abs_y"
    c_nei: str = "1"
    c_self_mult: float = 5.0
    kind: str = "cos_with_phase"
    allocation: str = "equal"
    d0_ratio: int = 20
    eps: float = 1e-6
    max_rounds: int = 2000
    methods: tuple[str, ...] = ("dkla_rff", "dkla_ddrf", "dekrr_ddrf")
    out: str = "results"

    def c_nei_value(self, N: int) -> float:
        """``c_nei`` is absolute, or a multiple of the training count when suffixed ``N``."""
        return float(self.c_nei[:-1] or 1) * N if self.c_nei.endswith("N") else float(self.c_nei)


REQUIRED = ("dataset", "J", "lam", "sigma", "seeds")


def _ints(text: str) -> tuple[int, ...]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ValueError("empty list")
    return tuple(out)


def _c_nei(text: str) -> str:
    t = text.replace(" ", "")
    float(t[:-1] or 1) if t.endswith("N") else float(t)
    return t


def _choice(*options):
    def conv(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return conv


def _methods(text: str) -> tuple[str, ...]:
    ms = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in ms if m not in METHODS]
    if bad or not ms:
        raise ValueError(f"unknown method(s) {bad}; expected from {METHODS}")
    return ms


PARSERS = {
    "dataset": str,
    "J": int,
    "lam": float,
    "sigma": float,
    "seeds": _ints,
    "Dbar": int,
    "D_list": _ints,
    "format": _choice("csv", "libsvm"),
    "target": str,
    "n_features": int,
    "degree": int,
    "edge_list": str,
    "partition": _choice("balanced", "noniid_abs_y", "noniid_x_norm", "imbalanced"),
    "c_nei": _c_nei,
    "c_self_mult": float,
    "kind": _choice("paired_cos_sin", "cos_with_phase"),
    "allocation": _choice("equal", "sqrt_proportional"),
    "d0_ratio": int,
    "eps": float,
    "max_rounds": int,
    "methods": _methods,
    "out": str,
}


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    values: dict[str, object] = {}
    where: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (t.strip() for t in line.split("=", 1))
        if key not in PARSERS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in where:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} (first set on line {where[key]})")
        try:
            values[key] = PARSERS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {raw!r} ({exc})") from None
        where[key] = lineno
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"{path}: missing required key(s) {', '.join(missing)}")
    if ("Dbar" in values) == ("D_list" in values):
        raise ConfigError(f"{path}: set exactly one of 'Dbar' or 'D_list'")
    for key in ("dataset", "edge_list"):
        if key in values:
            p = Path(values[key])
            if not p.is_absolute():
                p = path.parent / p
            if not p.exists():
                raise ConfigError(f"{path}:{where[key]}: {key} file {str(p)!r} does not exist")
            values[key] = str(p.resolve())
    cfg = ExperimentConfig(**values)
    if cfg.J < 1 or (cfg.Dbar is not None and cfg.Dbar < 1):
        raise ConfigError(f"{path}: J and Dbar must be >= 1")
    if cfg.D_list is not None and len(cfg.D_list) != cfg.J:
        raise ConfigError(f"{path}:{where['D_list']}: D_list needs {cfg.J} entries")
    for f in fields(ExperimentConfig):
        if f.name not in values:
            log.info("default %s = %r", f.name, getattr(cfg, f.name))
    return cfg


def _file_sha(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_record(cfg: ExperimentConfig) -> dict:
    """Every result-affecting setting, with input file digests."""
    rec = asdict(cfg)
    rec.pop("out")
    rec["dataset_sha256"] = _file_sha(cfg.dataset)
    if cfg.edge_list:
        rec["edge_list_sha256"] = _file_sha(cfg.edge_list)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in rec.items()}


def hash_record(rec: dict) -> str:
    return hashlib.sha256(json.dumps(rec, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------- pipeline


class Experiment:
    """Data, topology and shards shared by all runs of one config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        raw = load_table(cfg.dataset, cfg.format, cfg.target, cfg.n_features)
        self.data: Dataset = normalize(raw)
        self.topology: Topology = (
            load_edge_list(cfg.edge_list, cfg.J) if cfg.edge_list else _topology(cfg.J, cfg.degree)
        )
        if self.topology.J != cfg.J:
            raise ConfigError(f"topology has {self.topology.J} nodes, config says J={cfg.J}")
        self._shards: dict[int, list] = {}

    def shards(self, seed: int):
        if seed not in self._shards:
            part = make_partition(self.data, self.cfg.J, self.cfg.partition, seed)
            self._shards[seed] = (part, split_train_test(part, self.data, seed))
        return self._shards[seed]

    def method_config(self, shards, Dbar: int | None) -> MethodConfig:
        cfg = self.cfg
        if Dbar is None and cfg.D_list is not None:
            D_js = cfg.D_list
        else:
            D_js = allocate_features([sh.n_train for sh in shards], Dbar or cfg.Dbar, cfg.allocation)
        N = sum(sh.n_train for sh in shards)
        return MethodConfig(
            lam=cfg.lam,
            sigma=cfg.sigma,
            D_js=tuple(D_js),
            c_nei=cfg.c_nei_value(N),
            c_self_mult=cfg.c_self_mult,
            kind=cfg.kind,
            d0_ratio=cfg.d0_ratio,
            eps=cfg.eps,
            max_rounds=cfg.max_rounds,
        )

    def run_one(self, method: str, seed: int, Dbar: int | None = None):
        _, shards = self.shards(seed)
        mc = self.method_config(shards, Dbar)
        result = run_baseline(method, mc, self.topology, shards, seed)
        dbar = Dbar if Dbar is not None else (self.cfg.Dbar or round(float(np.mean(mc.D_js))))
        row = {
            "dataset": self.data.name,
            "method": method,
            "Dbar": dbar,
            "seed": seed,
            "rse": result.meta["test_rse"],
            "comm_scalars": result.iteration_scalars,
            "rounds": result.rounds,
        }
        return row, result


def _topology(J: int, k: int) -> Topology:
    if J == 1:
        return Topology.single()
    return ring_lattice(J, min(k, J - 1 - (J - 1) % 2))


# --------------------------------------------------------------------------- output


def _csv_text(header: str, field_names, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(field_names)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (r[f] for f in field_names)])
    return buf.getvalue()


def _prepare_out(out: Path, force: bool):
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _write(out: Path, name: str, text: str, files: dict):
    p = out / name
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")
    files[name] = hashlib.sha256(text.encode()).hexdigest()


def _execute(cfg: ExperimentConfig, out: Path, dbars, methods, force: bool, sweep: bool):
    record = config_record(cfg)
    if sweep:
        record["sweep_dbar"] = list(dbars)
        record["sweep_methods"] = list(methods)
    chash = hash_record(record)
    _prepare_out(out, force)
    exp = Experiment(cfg)
    files: dict[str, str] = {}
    rows = []
    for dbar in dbars:
        for method in methods:
            for seed in cfg.seeds:
                context = {"seed": seed, "method": method, "Dbar": dbar}
                try:
                    row, result = exp.run_one(method, seed, dbar)
                except Exception as exc:
                    exc.context = context
                    raise
                rows.append(row)
                tag = f"{method}_Dbar{row['Dbar']}_seed{seed}"
                _write(out, f"rounds/{tag}.csv", result.round_log_csv(f"config_hash={chash}"), files)
                log.info("%s rse=%.4f rounds=%d (%s)", tag, row["rse"], row["rounds"], result.reason)
    for seed in cfg.seeds:
        part, _ = exp.shards(seed)
        obj = json.loads(part.to_json())
        obj["config_hash"] = chash
        _write(out, f"partitions/seed{seed}.json", json.dumps(obj), files)
    _write(out, "results.csv", _csv_text(chash, RESULT_FIELDS, rows), files)
    if sweep:
        agg = []
        for dbar in dbars:
            for method in methods:
                vals = [r["rse"] for r in rows if r["Dbar"] == dbar and r["method"] == method]
                _, shards = exp.shards(cfg.seeds[0])
                mc = exp.method_config(shards, dbar)
                D_js = mc.D_js if method.startswith("dekrr") else [round(float(np.mean(mc.D_js)))] * cfg.J
                agg.append(
                    {
                        "Dbar": dbar,
                        "method": method,
                        "mean_rse": float(np.mean(vals)),
                        "std_rse": float(np.std(vals)),
                        "comm_per_round": comm_cost(exp.topology, D_js, 1, cfg.kind)["per_round"],
                    }
                )
        _write(out, "sweep.csv", _csv_text(chash, SWEEP_FIELDS, agg), files)
    manifest = {"config": record, "config_hash": chash, "files": files, "status": "ok"}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return rows


def cmd_run(cfg: ExperimentConfig, out: Path, force: bool = False):
    dbar = cfg.Dbar
    return _execute(cfg, out, [dbar], cfg.methods, force, sweep=False)


def cmd_sweep(cfg: ExperimentConfig, dbars, methods, out: Path, force: bool = False):
    if not dbars:
        raise ConfigError("empty Dbar list")
    cfg = replace(cfg, D_list=None)
    return _execute(cfg, out, list(dbars), list(methods), force, sweep=True)


def verify(directory: str | Path) -> list[str]:
    """Problems found when re-checking a results directory; empty when consistent."""
    directory = Path(directory)
    problems = []
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    chash = hash_record(manifest["config"])
    if chash != manifest["config_hash"]:
        problems.append("manifest config_hash does not match its config")
    for name, digest in manifest["files"].items():
        p = directory / name
        if not p.exists():
            problems.append(f"{name}: missing")
            continue
        text = p.read_text(encoding="utf-8")
        if hashlib.sha256(text.encode()).hexdigest() != digest:
            problems.append(f"{name}: content digest mismatch")
        if name.endswith(".csv"):
            first = text.split("\n", 1)[0]
            if first != f"# config_hash={chash}":
                problems.append(f"{name}: embedded config hash mismatch")
        elif name.endswith(".json"):
            if json.loads(text).get("config_hash") != chash:
                problems.append(f"{name}: embedded config hash mismatch")
    return problems


# --------------------------------------------------------------------------- entry point


def _error(exc: BaseException, out: Path | None) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    payload.update(getattr(exc, "context", {}))
    text = json.dumps(payload, sort_keys=True)
    print(text, file=sys.stderr)
    if out is not None and out.exists():
        (out / "error.json").write_text(text + "\n", encoding="utf-8")
    return 2 if isinstance(exc, (ArithmeticError, np.linalg.LinAlgError)) else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="dekrr", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name in ("run", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--out")
        p.add_argument("--force", action="store_true")
        p.add_argument("--seed-offset", type=int, default=0)
        if name == "sweep":
            p.add_argument("--dbar", required=True)
            p.add_argument("--methods")
    p = sub.add_parser("verify")
    p.add_argument("dir")
    args = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )

    if args.cmd == "verify":
        try:
            problems = verify(args.dir)
        except (OSError, ValueError, KeyError) as exc:
            return _error(exc, None)
        for msg in problems:
            print(msg)
        if not problems:
            print("ok")
        return 1 if problems else 0

    out = None
    try:
        cfg = parse_config(args.config)
        if args.seed_offset:
            cfg = replace(cfg, seeds=tuple(s + args.seed_offset for s in cfg.seeds))
        out = Path(args.out or cfg.out)
        if not out.is_absolute() and not args.out:
            out = Path(args.config).parent / out
        if args.cmd == "run":
            cmd_run(cfg, out, args.force)
        else:
            methods = _methods(args.methods) if args.methods else cfg.methods
            cmd_sweep(cfg, _ints(args.dbar), methods, out, args.force)
    except Exception as exc:
        if isinstance(exc, FileExistsError):
            out = None
        return _error(exc, out)
    return 0


if __name__ == "__main__":
    sys.exit(main())

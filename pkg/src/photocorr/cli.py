"""Command-line front end.

Every subcommand reads one JSON config (SI units, unit-suffixed keys),
validates it against a schema, runs deterministically from ``--seed`` and
writes its outputs plus a ``manifest.json`` into ``--out``. Each output
references the SHA-256 of the canonical config.

Exit codes: 0 success, 2 configuration error, 3 numeric or regime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import warnings
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .correlator import g2_histogram, g2_slope_at_zero, g2_zero, g3_zero_direct, write_histogram_csv
from .deadtime import BeyondLinearRegimeError, DetectorSpec, detect
from .extract import (
    LinearRegimeWarning,
    fit_scan,
    fit_series,
    plan_snr,
    run_scan,
    write_result_json,
    write_scan_csv,
)
from .qmt import QmtParams, RelationUndefinedError, TruncationError, poisson_distribution, relation_check, skewness_expansion, steady_state
from .sources import (
    CoxSource,
    MicromaserSource,
    PoissonSource,
    TruncationBoundError,
    generate_cox,
    generate_micromaser,
    generate_poisson,
    multisplit,
)
from .timetag import StreamFormatError, TimeTagStream, read_stream, stats, write_stream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


# ------------------------------------------------------------------ schemas

_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_PATH = {"type": "string", "minLength": 1}

_DETECTOR = {
    "type": "object",
    "properties": {
        "dead_time_s": _NONNEG,
        "efficiency": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "channel": {"type": "integer", "minimum": 0, "maximum": 65535},
    },
    "additionalProperties": False,
}

_SOURCE = {
    "oneOf": [
        {
            "type": "object",
            "properties": {"type": {"const": "poisson"}, "rate_cps": _POS},
            "required": ["type", "rate_cps"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "type": {"const": "cox"},
                "mean_rate_cps": _POS,
                "intensity_law": {"enum": ["constant", "exponential", "two_state"]},
                "dwell_time_s": _POS,
                "levels_cps": {"type": "array", "items": _NONNEG, "minItems": 2, "maxItems": 2},
                "switching_rates_hz": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2},
            },
            "required": ["type", "mean_rate_cps"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "type": {"const": "micromaser"},
                "coupling_g_rad_s": _NONNEG,
                "t_int_s": _POS,
                "cavity_linewidth_hz": _POS,
                "atom_rate_cps": _NONNEG,
                "detection_efficiency": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "n_initial": {"type": "integer", "minimum": 0},
                "n_max": {"type": "integer", "minimum": 1},
                "warmup_s": _NONNEG,
            },
            "required": ["type", "atom_rate_cps"],
            "additionalProperties": False,
        },
    ]
}

_GRID = {
    "oneOf": [
        {"type": "array", "items": _NONNEG, "minItems": 1},
        {
            "type": "object",
            "properties": {"start_s": _NONNEG, "stop_s": _POS, "n": {"type": "integer", "minimum": 1}},
            "required": ["start_s", "stop_s", "n"],
            "additionalProperties": False,
        },
    ]
}

_COMMON = {"seed": {"type": "integer", "minimum": 0}, "threads": {"type": "integer", "minimum": 1}}


def _schema(props: dict, required: list[str]) -> dict:
    return {
        "type": "object",
        "properties": {**_COMMON, **props},
        "required": required,
        "additionalProperties": False,
    }


SCHEMAS = {
    "simulate": _schema(
        {
            "source": _SOURCE,
            "span_s": _POS,
            "resolution_ps": {"type": "integer", "minimum": 1},
            "split": {
                "oneOf": [
                    {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    {"type": "array", "items": _POS, "minItems": 2},
                ]
            },
            "detectors": {"type": "array", "items": _DETECTOR},
        },
        ["source", "span_s"],
    ),
    "filter": _schema(
        {"input": _PATH, "dead_time_s": _NONNEG, "efficiency": _DETECTOR["properties"]["efficiency"]},
        ["input", "dead_time_s"],
    ),
    "correlate": _schema(
        {"start": _PATH, "stop": _PATH, "bin_time_s": _POS, "max_delay_s": _NONNEG},
        ["start", "stop", "bin_time_s"],
    ),
    "g3-direct": _schema(
        {"inputs": {"type": "array", "items": _PATH, "minItems": 3, "maxItems": 3}, "bin_time_s": _POS},
        ["inputs", "bin_time_s"],
    ),
    "scan": _schema(
        {"start": _PATH, "stop": _PATH, "physical_tau_s": _NONNEG, "tau_grid_s": _GRID, "bin_time_s": _POS},
        ["start", "stop", "physical_tau_s", "tau_grid_s", "bin_time_s"],
    ),
    "extract": _schema(
        {
            "start": _PATH,
            "stop": _PATH,
            "physical_tau_s": _NONNEG,
            "tau_grid_s": _GRID,
            "bin_time_s": _POS,
            "fit_order": {"type": "integer", "minimum": 1, "maximum": 6},
            "n_min": {"type": "integer", "minimum": 2},
            "correlated": {"type": "boolean"},
        },
        ["start", "stop", "physical_tau_s", "tau_grid_s", "bin_time_s"],
    ),
    "qmt": _schema(
        {
            "coupling_g_rad_s": _NONNEG,
            "t_int_s": _POS,
            "kappa_rad_s": _POS,
            "cavity_linewidth_hz": _POS,
            "atom_rate_cps": {"oneOf": [_NONNEG, {"type": "array", "items": _NONNEG, "minItems": 1}]},
            "n_max": {"type": "integer", "minimum": 0},
        },
        ["atom_rate_cps"],
    ),
    "plan-snr": _schema(
        {"T0_s": _POS, "waiting_time_s": _POS, "bin_time_s": _POS, "order_N": {"type": "integer", "minimum": 1}},
        ["T0_s", "waiting_time_s", "bin_time_s", "order_N"],
    ),
}


# ----------------------------------------------------------------- helpers


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, config: dict, seed: int, out: Path, threads: int):
        self.command = command
        self.config = config
        self.seed = seed
        self.out = out
        self.threads = threads
        canonical = json.dumps({"command": command, "config": config, "seed": seed}, sort_keys=True, separators=(",", ":"))
        self.config_hash = hashlib.sha256(canonical.encode()).hexdigest()
        self.files: list[str] = []
        self.summary: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def header(self) -> tuple[str, ...]:
        return (f"command={self.command}", f"config_sha256={self.config_hash}", f"seed={self.seed}")

    def write_json(self, name: str, doc: dict) -> None:
        doc = {"config_sha256": self.config_hash, **doc}
        with open(self.path(name), "w", newline="\n") as fh:
            json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def manifest(self) -> None:
        doc = {
            "command": self.command,
            "config": self.config,
            "config_sha256": self.config_hash,
            "seed": self.seed,
            "version": __version__,
            "files": sorted(self.files),
            "summary": self.summary,
        }
        with open(self.out / "manifest.json", "w", newline="\n") as fh:
            json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _load_stream(path: str, base: Path) -> TimeTagStream:
    p = Path(path)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        raise ConfigError(f"input stream not found: {p}")
    try:
        return read_stream(p)
    except StreamFormatError as exc:
        raise ConfigError(f"{p}: {exc}") from None


def _grid(spec) -> np.ndarray:
    if isinstance(spec, dict):
        return np.linspace(spec["start_s"], spec["stop_s"], spec["n"])
    return np.asarray(spec, dtype=np.float64)


def _child_seed(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, np.uint64)[0])


def _stream_summary(s: TimeTagStream) -> dict:
    st = stats(s)
    return {"count": st.count, "flux_cps": st.flux_cps, "channel": s.channel, "span_s": s.span_s}


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "photocorr"
    return plt


def _save_svg(plt, fig, run: Run, name: str) -> None:
    fig.savefig(run.path(name), format="svg", metadata={"Date": None, "Description": f"config_sha256={run.config_hash}"})
    plt.close(fig)


# ----------------------------------------------------------------- commands


def cmd_simulate(run: Run) -> None:
    cfg = run.config
    src_cfg = dict(cfg["source"])
    kind = src_cfg.pop("type")
    span = cfg["span_s"]
    res = cfg.get("resolution_ps", 1)
    seq_src, seq_split, seq_det = np.random.SeedSequence(run.seed).spawn(3)
    warmup = src_cfg.pop("warmup_s", 0.0)
    for key in ("levels_cps", "switching_rates_hz"):
        if key in src_cfg:
            src_cfg[key] = tuple(src_cfg[key])
    try:
        src = {"poisson": PoissonSource, "cox": CoxSource, "micromaser": MicromaserSource}[kind](**src_cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    src_seed = _child_seed(seq_src)
    if kind == "poisson":
        stream = generate_poisson(src, span, src_seed, res)
    elif kind == "cox":
        stream = generate_cox(src, span, src_seed, res)
    else:
        stream = generate_micromaser(src, span, src_seed, res, warmup_s=warmup)
    split = cfg.get("split")
    if split is None:
        outputs = [stream]
    elif isinstance(split, list):
        outputs = list(multisplit(stream, split, seq_split))
    else:
        outputs = list(multisplit(stream, [split, 1 - split], seq_split))
    detectors = cfg.get("detectors", [])
    if detectors and len(detectors) not in (1, len(outputs)):
        raise ConfigError(f"{len(detectors)} detectors given for {len(outputs)} outputs")
    det_seeds = seq_det.spawn(len(outputs))
    files = []
    for i, s in enumerate(outputs):
        if detectors:
            d = detectors[i] if len(detectors) > 1 else detectors[0]
            spec = DetectorSpec(d.get("dead_time_s", 0.0), d.get("efficiency", 1.0), d.get("channel", s.channel))
            s = detect(s, spec, det_seeds[i])
        name = "stream.ptag" if len(outputs) == 1 else f"stream_{i + 1}.ptag"
        write_stream(s, run.path(name))
        files.append({"file": name, **_stream_summary(s)})
    run.summary = {"streams": files}


def cmd_filter(run: Run) -> None:
    cfg = run.config
    s = _load_stream(cfg["input"], run.base)
    spec = DetectorSpec(cfg["dead_time_s"], cfg.get("efficiency", 1.0), s.channel)
    out = detect(s, spec, np.random.SeedSequence(run.seed))
    write_stream(out, run.path("filtered.ptag"))
    run.summary = {"input": _stream_summary(s), "output": _stream_summary(out)}


def cmd_correlate(run: Run) -> None:
    cfg = run.config
    a = _load_stream(cfg["start"], run.base)
    b = _load_stream(cfg["stop"], run.base)
    t_b = cfg["bin_time_s"]
    max_delay = cfg.get("max_delay_s", 50 * t_b)
    hist = g2_histogram(a, b, t_b, max_delay, threads=run.threads)
    zero = g2_zero(a, b, t_b, threads=run.threads)
    write_histogram_csv(hist, run.path("g2_histogram.csv"), run.header())
    doc = {"g2_zero": zero.value, "g2_zero_err": zero.std_error, "bin_time_s": zero.bin_time_s, "pairs": zero.n_pairs_or_triples}
    if hist.values.size >= 3:
        slope = g2_slope_at_zero(hist)
        doc.update(slope_at_zero_per_s=slope.value, slope_at_zero_err=slope.std_error)
    run.write_json("g2.json", doc)
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(hist.delays * 1e6, hist.values, hist.errors, fmt=".", ms=3)
    ax.axhline(1.0, color="0.5", lw=0.8, ls="--")
    ax.set_xlabel("delay (µs)")
    ax.set_ylabel("g2(t)")
    _save_svg(plt, fig, run, "g2.svg")
    run.summary = doc


def cmd_g3_direct(run: Run) -> None:
    cfg = run.config
    s1, s2, s3 = (_load_stream(p, run.base) for p in cfg["inputs"])
    est = g3_zero_direct(s1, s2, s3, cfg["bin_time_s"])
    doc = {"g3_zero": est.value, "g3_zero_err": est.std_error, "bin_time_s": est.bin_time_s, "triples": est.n_pairs_or_triples}
    run.write_json("g3_direct.json", doc)
    run.summary = doc


def _scan(run: Run):
    cfg = run.config
    a = _load_stream(cfg["start"], run.base)
    b = _load_stream(cfg["stop"], run.base)
    return run_scan(a, b, cfg["physical_tau_s"], _grid(cfg["tau_grid_s"]), cfg["bin_time_s"], threads=run.threads)


def cmd_scan(run: Run) -> None:
    scan = _scan(run)
    write_scan_csv(scan, run.path("scan.csv"), run.header())
    run.summary = {"points": int(scan.tau_grid_s.size), "bin_time_s": scan.bin_time_s}


def cmd_extract(run: Run) -> None:
    cfg = run.config
    scan = _scan(run)
    order = cfg.get("fit_order", 2)
    corr = cfg.get("correlated", True)
    result = fit_scan(scan, order, correlated=corr)
    series = [fit_scan(scan, order, n, correlated=corr) for n in range(cfg.get("n_min", order + 2), scan.tau_grid_s.size + 1)]
    write_scan_csv(scan, run.path("scan.csv"), run.header())
    write_result_json(result, run.path("result.json"), {"config_sha256": run.config_hash})
    with open(run.path("ratio_series.csv"), "w", newline="\n") as fh:
        for line in run.header():
            fh.write(f"# {line}\n")
        fh.write("n_points,g2,g2_err,g3,g3_err,ratio,ratio_err\n")
        for r in series:
            fh.write(
                f"{r.n_points_used},{r.g2_zero:.12e},{r.g2_error:.12e},{r.g3_zero:.12e},"
                f"{r.g3_error:.12e},{r.ratio:.12e},{r.ratio_error:.12e}\n"
            )
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    tau_ns = scan.tau_grid_s * 1e9
    ax.errorbar(tau_ns, scan.g2_values, scan.g2_errors, fmt="o", ms=3, label="observed")
    x = np.asarray(result.x)
    dense = np.linspace(0.0, x[-1], 200)
    ax.plot(dense / x[-1] * tau_ns[-1], np.polyval(result.coefficients[::-1], dense), "-", label="fit")
    ax.set_xlabel("dead time (ns)")
    ax.set_ylabel("g2'(0)")
    ax.legend()
    _save_svg(plt, fig, run, "scan.svg")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar([r.n_points_used for r in series], [r.ratio for r in series], [r.ratio_error for r in series], fmt="o", ms=3)
    ax.axhline(3.0, color="k", ls="--", lw=1)
    ax.set_xlabel("number of fit points")
    ax.set_ylabel("(1 - g3) / (1 - g2)")
    _save_svg(plt, fig, run, "ratio.svg")
    run.summary = result.to_dict()


def _qmt_params(cfg: dict, rate: float) -> QmtParams:
    kw = {k: cfg[k] for k in ("coupling_g_rad_s", "t_int_s", "kappa_rad_s", "n_max") if k in cfg}
    if "cavity_linewidth_hz" in cfg:
        if "kappa_rad_s" in cfg:
            raise ConfigError("give either kappa_rad_s or cavity_linewidth_hz, not both")
        kw["kappa_rad_s"] = 2 * math.pi * cfg["cavity_linewidth_hz"]
    return QmtParams(atom_rate_cps=rate, **kw)


def cmd_qmt(run: Run) -> None:
    cfg = run.config
    rates = cfg["atom_rate_cps"]
    rates = rates if isinstance(rates, list) else [rates]
    reports = []
    dists = []
    for i, r in enumerate(rates):
        params = _qmt_params(cfg, r)
        dist = steady_state(params)
        dists.append(dist)
        rep = {
            "atom_rate_cps": r,
            "mean_atom_number": params.mean_atom_number,
            "n_max": int(dist.p.size - 1),
            "mean_n": dist.mean,
            "q_mandel": dist.q_mandel,
            "g2_zero": dist.g2_zero,
            "g3_zero": dist.g3_zero,
            "gamma_cqm": dist.skewness,
            "gamma_poi": dist.gamma_poisson,
            "multimodal": dist.multimodal,
            "ratio": None,
            "residual": None,
        }
        if dist.variance > 0 and dist.mean > 0:
            rep["g3_expansion"] = skewness_expansion(dist)
        try:
            rc = relation_check(dist)
            rep["ratio"], rep["residual"] = rc.ratio, rc.residual
        except (RelationUndefinedError, ValueError) as exc:
            rep["relation_note"] = str(exc)
        reports.append(rep)
        poi = poisson_distribution(dist.mean, dist.p.size - 1) if dist.mean > 0 else None
        with open(run.path(f"distribution_{i + 1}.csv"), "w", newline="\n") as fh:
            for line in run.header():
                fh.write(f"# {line}\n")
            fh.write(f"# atom_rate_cps={r!r}\n")
            fh.write("n,p,p_poisson\n")
            for n, p in enumerate(dist.p):
                pp = poi.p[n] if poi is not None else (1.0 if n == 0 else 0.0)
                fh.write(f"{n},{p:.12e},{pp:.12e}\n")
    run.write_json("moments.json", {"panels": reports})
    plt = _figure()
    fig, axes = plt.subplots(len(dists), 1, figsize=(6, 2.2 * len(dists)), squeeze=False)
    for ax, dist, rep in zip(axes[:, 0], dists, reports):
        ax.plot(dist.n, dist.p, "-", label="QMT")
        if dist.mean > 0:
            ax.plot(dist.n, poisson_distribution(dist.mean, dist.p.size - 1).p, "--", label="Poisson")
        ax.set_ylabel("p(n)")
        ax.set_title(f"r = {rep['atom_rate_cps']:.4g} /s, <n> = {dist.mean:.1f}", fontsize=9)
    axes[-1, 0].set_xlabel("n")
    axes[0, 0].legend(fontsize=8)
    fig.tight_layout()
    _save_svg(plt, fig, run, "qmt.svg")
    run.summary = {"panels": len(reports)}


def cmd_plan_snr(run: Run) -> None:
    cfg = run.config
    plan = plan_snr(cfg["T0_s"], cfg["waiting_time_s"], cfg["bin_time_s"], cfg["order_N"])
    doc = {"snr": plan.snr, "time_multiplier": plan.time_multiplier}
    run.write_json("snr.json", doc)
    run.summary = doc
    print(json.dumps(_jsonable(doc), sort_keys=True))


COMMANDS = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "correlate": cmd_correlate,
    "g3-direct": cmd_g3_direct,
    "scan": cmd_scan,
    "extract": cmd_extract,
    "qmt": cmd_qmt,
    "plan-snr": cmd_plan_snr,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="photocorr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed (overrides the config)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=None, help="worker threads for correlators")
    return parser


def _load_config(path: str, command: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"schema violation at {where}: {exc.message}") from None
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config, args.command)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        threads = args.threads if args.threads is not None else cfg.get("threads", 1)
        if threads < 1:
            raise ConfigError("threads must be >= 1")
        run = Run(args.command, cfg, seed, Path(args.out), threads)
        run.base = Path(args.config).resolve().parent
        with warnings.catch_warnings():
            warnings.simplefilter("always", LinearRegimeWarning)
            COMMANDS[args.command](run)
        run.manifest()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BeyondLinearRegimeError, TruncationError, TruncationBoundError, np.linalg.LinAlgError, ValueError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

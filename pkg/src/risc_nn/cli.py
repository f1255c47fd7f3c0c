"""Command-line front end: run, sweep, translate, oracle and report.

Exit codes: 0 ok, 1 configuration error, 2 equivalence failure, 3 deadlock.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import ConfigError, HardwareConfig, load_hardware, tomllib
from .graph import GraphError, dump_graph, load_graph
from .isa import IsaError, disassemble, pack_image
from .kernels import (
    LAYERS,
    ConvLayerSpec,
    Kernel,
    KernelError,
    conv_kernel,
    lower_cisc,
)
from .metrics import EnergyModel, TruncatedTrace, aggregate, report
from .oracle import OracleError, run_functional
from .trace import TraceFormatError, load_trace
from .translator import TranslationError
from .uncore import DeadlockDetected, SimulationError, host_run

EXIT_OK, EXIT_CONFIG, EXIT_MISMATCH, EXIT_DEADLOCK = 0, 1, 2, 3

log = logging.getLogger("risc_nn")

RUN_KEYS = {
    "layer": str, "scheme": str, "instances": int, "cisc": str, "shape": str, "graph": str,
    "density": float, "mask_seed": int, "seed": int, "check_oracle": bool, "out": str,
    "format": str, "trace": bool, "eval_order": str,
}


class CliConfigError(Exception):
    pass


# -- configuration -------------------------------------------------------------------


def _parse_scalar(text: str) -> Any:
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(text, 0) if conv is int else conv(text)
        except ValueError:
            pass
    return text


def parse_overrides(items: Sequence[str]) -> dict[str, Any]:
    """``key=value`` pairs; ``energy.mac=2`` sets an energy weight."""
    out: dict[str, Any] = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise CliConfigError(f"--hw {item!r}: expected key=value")
        if key.startswith("energy."):
            out.setdefault("energy", {})[key[7:]] = _parse_scalar(val)
        else:
            out[key] = _parse_scalar(val)
    return out


def load_run_config(path: str | None) -> tuple[dict[str, Any], dict[str, Any]]:
    """Return ([hardware] table, [run] table) from a TOML run file."""
    if path is None:
        return {}, {}
    p = Path(path)
    try:
        data = tomllib.loads(p.read_text())
    except OSError as exc:
        raise CliConfigError(f"{p}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise CliConfigError(f"{p}: {exc}") from None
    unknown = set(data) - {"hardware", "run"}
    if unknown:
        raise CliConfigError(f"{p}: unknown table(s) {sorted(unknown)}; expected [hardware] and [run]")
    run = data.get("run", {})
    for key, val in run.items():
        if key not in RUN_KEYS:
            raise CliConfigError(f"{p} [run]: unknown key {key!r}")
        want = RUN_KEYS[key]
        if want is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if not isinstance(val, want) or (want is int and isinstance(val, bool)):
            raise CliConfigError(f"{p} [run].{key}: expected {want.__name__}, got {type(val).__name__}")
        run[key] = val
    return data.get("hardware", {}), run


def resolve(args: argparse.Namespace) -> tuple[HardwareConfig, dict[str, Any]]:
    """Merge defaults, the run file and command-line flags (flags win)."""
    hw_table, run = load_run_config(args.config)
    overrides = dict(hw_table)
    overrides.update(parse_overrides(args.hw or []))
    if getattr(args, "simd", None) and isinstance(args.simd, int):
        overrides["simd"] = args.simd
    try:
        cfg = load_hardware(None, overrides)
    except (ConfigError, TypeError) as exc:
        raise CliConfigError(str(exc)) from None
    for key in RUN_KEYS:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            run[key] = val
    return cfg, run


def parse_layer(text: str) -> ConvLayerSpec:
    """A name from LAYERS or ``H=..,W=..,R=..,C=..,K=..[,field=..]``."""
    if text in LAYERS:
        return LAYERS[text]
    if "=" not in text:
        raise CliConfigError(f"unknown layer {text!r}; known: {', '.join(sorted(LAYERS))}")
    fields = {f.name for f in dataclasses.fields(ConvLayerSpec)}
    kw: dict[str, int] = {}
    for part in text.split(","):
        key, _, val = part.partition("=")
        key = key.strip()
        if key not in fields:
            raise CliConfigError(f"layer field {key!r} not one of {sorted(fields)}")
        try:
            kw[key] = int(val)
        except ValueError:
            raise CliConfigError(f"layer field {key}: {val!r} is not an integer") from None
    try:
        return ConvLayerSpec(**kw)
    except TypeError as exc:
        raise CliConfigError(f"layer {text!r}: {exc}") from None


def build_workload(run: dict[str, Any], cfg: HardwareConfig) -> Kernel:
    picked = [k for k in ("layer", "cisc", "graph") if run.get(k)]
    if len(picked) != 1:
        raise CliConfigError("choose exactly one workload: --layer, --cisc or --graph")
    seed = run.get("seed", 0)
    try:
        if run.get("layer"):
            if not run.get("scheme"):
                raise CliConfigError("--layer needs --scheme")
            return conv_kernel(
                parse_layer(run["layer"]),
                run["scheme"],
                instances=run.get("instances", 1),
                simd=cfg.simd,
                seed=seed,
                density=run.get("density"),
                mask_seed=run.get("mask_seed", 0),
            )
        if run.get("cisc"):
            return lower_cisc(run["cisc"], run.get("shape"), seed=seed, simd=cfg.simd)
        return Kernel(load_graph(run["graph"]), {})
    except (KernelError, GraphError, ValueError) as exc:
        raise CliConfigError(str(exc)) from None


# -- actions ---------------------------------------------------------------------------


def _write(out: str | None, name: str, text: str | bytes) -> None:
    if not out:
        return
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    path = d / name
    if isinstance(text, bytes):
        path.write_bytes(text)
    else:
        path.write_text(text)
    log.info("wrote %s", path)


def _oracle_check(kernel: Kernel, program, final_mem: np.ndarray | None) -> list[str]:
    """Compare the untimed oracle with expectations and, if given, the timed DRAM."""
    state = run_functional(program)
    problems = []
    regions = program.regions

    def oracle_region(name: str) -> np.ndarray:
        base, size = regions[name]
        return state.memory[base >> 1 : (base >> 1) + size // 2]

    problems += [f"oracle != reference in region {r}" for r in kernel.mismatches(oracle_region)]
    if final_mem is not None:
        for name in program.outputs:
            base, size = regions[name]
            got = final_mem[base >> 1 : (base >> 1) + size // 2]
            if not np.array_equal(got, oracle_region(name)):
                problems.append(f"timed simulator != oracle in region {name}")
    return problems


def cmd_run(args: argparse.Namespace) -> int:
    cfg, run = resolve(args)
    kernel = build_workload(run, cfg)
    program = kernel.translate(cfg)
    res = host_run(program, eval_order=run.get("eval_order", "ascending"), seed=run.get("seed", 0))
    counters = aggregate(res.trace, cfg)
    fmt = run.get("format", "human")
    text = report(counters, cfg, EnergyModel(cfg.energy), fmt)
    sys.stdout.write(text)
    out = run.get("out")
    _write(out, "report.json", report(counters, cfg, EnergyModel(cfg.energy), "json"))
    _write(out, "report.csv", report(counters, cfg, EnergyModel(cfg.energy), "csv"))
    if run.get("trace"):
        _write(out, "trace.csv", res.trace.dumps())
    problems = [f"timed simulator != reference in region {r}" for r in kernel.mismatches(res.read_region)]
    if run.get("check_oracle"):
        problems += _oracle_check(kernel, program, res.memory)
    for p in problems:
        print(f"FAIL: {p}", file=sys.stderr)
    if problems:
        return EXIT_MISMATCH
    if kernel.expected or run.get("check_oracle"):
        print("equivalence: pass")
    return EXIT_OK


def _split(text: str | None, conv=str) -> list:
    if not text:
        return []
    try:
        return [conv(t) for t in text.split(",") if t]
    except ValueError:
        raise CliConfigError(f"cannot parse list {text!r}") from None


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg, run = resolve(args)
    simds = _split(args.simd_list, int) or [cfg.simd]
    schemes = _split(args.schemes) or [run.get("scheme")]
    insts = _split(args.instance_list, int) or [run.get("instances", 1)]
    densities = _split(args.densities, float) or [run.get("density")]
    rows = {}
    failed = False
    for simd in simds:
        c_cfg = cfg.replace(simd=simd)
        for scheme in schemes:
            for n in insts:
                for dens in densities:
                    point = dict(run, scheme=scheme, instances=n, density=dens)
                    kernel = build_workload(point, c_cfg)
                    res = host_run(kernel.translate(c_cfg), seed=run.get("seed", 0))
                    label = f"simd={simd}"
                    if run.get("layer"):
                        label += f" scheme={scheme} n={n}"
                    if dens is not None:
                        label += f" density={dens}"
                    rows[label] = aggregate(res.trace, c_cfg)
                    if kernel.mismatches(res.read_region):
                        print(f"FAIL: {label}: output mismatch", file=sys.stderr)
                        failed = True
                    log.info("%s: %d cycles", label, res.cycles)
    # every row shares one energy model; SIMD differs per row, so report each with its own cfg
    fmt = run.get("format", "csv")
    chunks = []
    for i, (label, c) in enumerate(rows.items()):
        simd = int(label.split()[0].split("=")[1])
        text = report({label: c}, cfg.replace(simd=simd), EnergyModel(cfg.energy), fmt)
        if fmt == "csv" and i:
            text = text.split("\n", 1)[1]
        chunks.append(text)
    doc = "".join(chunks)
    if fmt == "json":
        merged = {}
        for ch in chunks:
            merged.update(json.loads(ch))
        doc = json.dumps(merged, indent=2) + "\n"
    sys.stdout.write(doc)
    _write(run.get("out"), f"sweep.{ 'json' if fmt == 'json' else 'csv' if fmt == 'csv' else 'txt'}", doc)
    return EXIT_MISMATCH if failed else EXIT_OK


def cmd_translate(args: argparse.Namespace) -> int:
    cfg, run = resolve(args)
    kernel = build_workload(run, cfg)
    program = kernel.translate(cfg)
    counts = program.static_counts()
    print(json.dumps(counts, indent=2))
    out = run.get("out")
    if out:
        _write(out, "graph.txt", dump_graph(kernel.graph))
        listing = []
        for d in sorted(program.descriptors, key=lambda d: (d.pe, d.slot)):
            listing.append(f"# {d.name} pe={d.pe} slot={d.slot} task={d.task_id} preds={d.pred_count}")
            listing.append(disassemble(program.images[d.name]))
        _write(out, "program.asm", "\n".join(listing) + "\n")
        image = b"".join(pack_image(program.images[d.name]) for d in program.descriptors)
        _write(out, "program.bin", image)
        _write(out, "static_counts.json", json.dumps(counts, indent=2) + "\n")
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    cfg, run = resolve(args)
    kernel = build_workload(run, cfg)
    program = kernel.translate(cfg)
    problems = _oracle_check(kernel, program, None)
    for p in problems:
        print(f"FAIL: {p}", file=sys.stderr)
    if problems:
        return EXIT_MISMATCH
    print("oracle: pass" if kernel.expected else "oracle: ran (no reference for custom graphs)")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    cfg, run = resolve(args)
    rows = {}
    for path in args.traces:
        try:
            rows[Path(path).stem] = aggregate(load_trace(path), cfg)
        except OSError as exc:
            raise CliConfigError(f"{path}: {exc.strerror}") from None
        except (TraceFormatError, TruncatedTrace) as exc:
            raise CliConfigError(f"{path}: {exc}") from None
    text = report(rows, cfg, EnergyModel(cfg.energy), run.get("format", "human"))
    sys.stdout.write(text)
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, workload: bool = True) -> None:
    p.add_argument("--config", help="TOML run file with [hardware] and [run] tables")
    p.add_argument("--hw", action="append", metavar="KEY=VALUE", help="hardware override (repeatable)")
    p.add_argument("--format", choices=("human", "csv", "json"))
    p.add_argument("--out", help="directory for artifacts")
    p.add_argument("-v", "--verbose", action="store_true")
    if not workload:
        return
    p.add_argument("--layer", help=f"layer name ({', '.join(sorted(LAYERS))}) or H=..,W=..,R=..,C=..,K=..")
    p.add_argument("--scheme", help="no_reuse, conv_reuse, filter_reuse, ifmap_reuse or all_reuse")
    p.add_argument("--instances", type=int)
    p.add_argument("--cisc", help="CISC op to lower, e.g. mmm")
    p.add_argument("--shape", help="CISC operand shape, e.g. 8x8")
    p.add_argument("--graph", help="custom execution-graph file")
    p.add_argument("--density", type=float, help="keep this fraction of weights (sparse run)")
    p.add_argument("--mask-seed", dest="mask_seed", type=int)
    p.add_argument("--seed", type=int)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="risc-nn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="translate, simulate and report one workload")
    _common(p)
    p.add_argument("--simd", type=int)
    p.add_argument("--check-oracle", dest="check_oracle", action="store_true")
    p.add_argument("--trace", action="store_true", help="also write trace.csv to --out")
    p.add_argument("--eval-order", dest="eval_order", choices=("ascending", "descending", "random"))
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid of SIMD widths, schemes, instances or densities")
    _common(p)
    p.add_argument("--simd", dest="simd_list", help="comma list of SIMD widths")
    p.add_argument("--schemes", help="comma list of schemes")
    p.add_argument("--instance-list", dest="instance_list", help="comma list of instance counts")
    p.add_argument("--densities", help="comma list of weight densities")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("translate", help="emit static counts and the translated program")
    _common(p)
    p.add_argument("--simd", type=int)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("oracle", help="run the untimed functional oracle against the reference")
    _common(p)
    p.add_argument("--simd", type=int)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="aggregate saved traces into a report")
    _common(p, workload=False)
    p.add_argument("traces", nargs="+")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TranslationError, IsaError) as exc:
        print(f"config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DeadlockDetected as exc:
        print(f"deadlock: {exc}", file=sys.stderr)
        return EXIT_DEADLOCK
    except (OracleError, SimulationError) as exc:
        print(f"equivalence failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())

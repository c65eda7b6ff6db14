"""Command-line interface.

Subcommands: ``quantize`` (calibrate + build a package), ``eval`` (variant
error report on held-out activations), ``analyze`` (observation statistics as
CSV), ``cost`` (analytic FLOPs/params table). Exit codes: 0 ok, 2 input
error, 3 numeric failure, 4 missing pack member. ``QE_JOBS`` overrides
``--jobs``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .calib import OutlierProfile, synth_calibration
from .costmodel import LayerShape, flops, params
from .errors import (ConfigError, InvalidInputError, MissingMemberError,
                     NumericFailureError, QEError, SingularMatrixError)
from .package import LayerBuild, read_package, write_package
from .pipeline import (DEFAULT_PROFILE, RunConfig, analyze_channels, build_layers,
                       default_profile_for, evaluate_layer)
from .quantizer import QuantScheme
from .refine import RefineConfig
from .tensorfile import read_tensor

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_MISSING = 4

VARIANT_ALIASES = {
    "shared": "shared_only",
    "random": "qe_random_route",
    "oracle": "qe_oracle_route",
}

# Default cost table: the three 7B-scale projection shapes at prefill length
# 128 with the standard rank/expert budget.
DEFAULT_COST_SHAPES = [
    {"name": "3584x3584", "s": 128, "d_in": 3584, "d_out": 3584, "r": 64, "n_experts": 8},
    {"name": "3584x18944", "s": 128, "d_in": 3584, "d_out": 18944, "r": 64, "n_experts": 8},
    {"name": "18944x3584", "s": 128, "d_in": 18944, "d_out": 3584, "r": 64, "n_experts": 8},
]


def _load_model_manifest(path: Path) -> list[tuple[str, np.ndarray]]:
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise InvalidInputError(f"{path}: cannot read: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: invalid JSON at offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict) or "layers" not in doc:
        raise InvalidInputError(f"{path}: expected an object with a 'layers' list")
    layers = []
    for entry in doc["layers"]:
        name = entry.get("name")
        ref = entry.get("weight")
        if not name or not ref:
            raise InvalidInputError(f"{path}: each layer needs 'name' and 'weight'")
        w = read_tensor(path.parent / ref).astype(np.float64)
        if w.ndim != 2:
            raise InvalidInputError(f"{path}: layer {name} weight must be 2-D")
        layers.append((name, w))
    return layers


def _load_calibration(spec: str, layer_names: list[str], widths: dict[str, int],
                      cfg: RunConfig) -> dict[str, np.ndarray]:
    """Resolve --calib into per-layer activation matrices.

    Accepts a single tensor file (shared by all layers), a JSON map
    {"layers": {name: tensor path}}, or the literal "synth".
    """
    if spec == "synth":
        out = {}
        for i, name in enumerate(layer_names):
            profile = default_profile_for(widths[name], cfg.n_modalities)
            x, _ = synth_calibration(widths[name], cfg.calib_tokens,
                                     cfg.n_modalities, cfg.seed + 1000 * i + 1,
                                     profile)
            out[name] = x
        return out
    path = Path(spec)
    if path.suffix == ".json":
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise InvalidInputError(f"{path}: cannot read: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}: invalid JSON at offset {exc.pos}: "
                                    f"{exc.msg}") from exc
        refs = doc.get("layers", {})
        out = {}
        for name in layer_names:
            if name not in refs:
                raise InvalidInputError(f"{path}: no calibration entry for layer {name}")
            out[name] = read_tensor(path.parent / refs[name]).astype(np.float64)
        return out
    shared = read_tensor(path).astype(np.float64)
    if shared.ndim != 2:
        raise InvalidInputError(f"{path}: calibration tensor must be 2-D")
    return {name: shared for name in layer_names}


def _resolve_jobs(args) -> int:
    env = os.environ.get("QE_JOBS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise InvalidInputError(f"QE_JOBS must be an integer, got {env!r}") from exc
    return max(1, args.jobs)


def _scheme_from_args(args) -> QuantScheme:
    mode = ("group_asymmetric" if args.weight_mode == "group"
            else "per_output_channel_symmetric")
    return QuantScheme.from_bits(args.wbits, args.abits, mode, args.group_size)


def cmd_quantize(args) -> int:
    cfg = RunConfig(
        scheme=_scheme_from_args(args),
        k=args.k, n_experts=args.experts, rank=args.rank,
        calib_tokens=args.calib_tokens, n_modalities=args.modalities,
        profile=DEFAULT_PROFILE,
        refine=RefineConfig(seed=args.seed) if args.refine else None,
        seed=args.seed)
    model_layers = _load_model_manifest(Path(args.model))
    widths = {name: w.shape[1] for name, w in model_layers}
    calib = _load_calibration(args.calib, [n for n, _ in model_layers], widths, cfg)
    for name, w in model_layers:
        if calib[name].shape[1] != w.shape[1]:
            raise InvalidInputError(
                f"layer {name}: calibration width {calib[name].shape[1]} "
                f"!= weight d_in {w.shape[1]}")

    named = [(name, w, calib[name]) for name, w in model_layers]
    builds = build_layers(named, cfg, jobs=_resolve_jobs(args))
    write_package(args.out, builds, cfg.to_dict())
    for b in builds:
        s = b.summary or {}
        print(f"{b.name}: shared_channels={s.get('n_shared_channels')} "
              f"routed_channels={s.get('n_routed_channels')} "
              f"clusters={s.get('cluster_sizes')} "
              f"shared_residual_norm={s.get('shared_residual_norm'):.6g} "
              f"refined={s.get('refined')}")
    print(f"package written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config, loaded = read_package(args.package)
    variants = []
    for raw in args.variants.split(","):
        v = raw.strip()
        variants.append(VARIANT_ALIASES.get(v, v))
    cfg = RunConfig(
        scheme=QuantScheme.from_dict(config["scheme"]),
        k=config["k"], n_experts=config["n_experts"], rank=config["rank"],
        calib_tokens=config["calib_tokens"], n_modalities=config["n_modalities"],
        seed=args.seed if args.seed is not None else config["seed"])
    widths = {layer.name: layer.pack.d_in for layer in loaded}
    calib = _load_calibration(args.calib, [l.name for l in loaded], widths, cfg)

    report = {"config": config, "seed": cfg.seed, "variants": variants, "layers": []}
    for layer in loaded:
        report["layers"].append(evaluate_layer(layer.name, layer.weight, layer.pack,
                                               calib[layer.name], variants, cfg.seed))
    agg = {}
    for v in variants:
        agg[v] = {
            metric: float(np.mean([l["variants"][v][metric] for l in report["layers"]]))
            for metric in ("mean_l2", "max_l2", "rel_fro")
        }
    report["aggregate"] = agg
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"report written to {args.out}")
    else:
        print(text)
    return EXIT_OK


def cmd_analyze(args) -> int:
    w = read_tensor(args.weights).astype(np.float64)
    x = read_tensor(args.calib).astype(np.float64)
    result = analyze_channels(w, x, args.k)
    out_prefix = Path(args.out)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)

    curve_path = out_prefix.with_suffix(".channels.csv")
    with open(curve_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["rank", "channel", "freq",
                                                "mean_abs_activation"])
        writer.writeheader()
        for row in result["curve"]:
            writer.writerow(row)

    overlap_path = out_prefix.with_suffix(".overlap.csv")
    with open(overlap_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stat", "value"])
        for key, value in result["overlap"].items():
            writer.writerow([key, value])
    print(f"wrote {curve_path} and {overlap_path}")
    return EXIT_OK


def _load_shapes(path: str | None) -> list[dict]:
    if path is None:
        return [dict(entry) for entry in DEFAULT_COST_SHAPES]
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InvalidInputError(f"{path}: cannot read: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: invalid JSON at offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, list):
        raise InvalidInputError(f"{path}: expected a JSON list of shapes")
    return doc


def cmd_cost(args) -> int:
    rows = []
    for entry in _load_shapes(args.shapes):
        shape = LayerShape(seq_len=int(entry["s"]), d_in=int(entry["d_in"]),
                           d_out=int(entry["d_out"]), rank=int(entry.get("r", 64)),
                           n_experts=int(entry.get("n_experts", 8)))
        base_flops = flops(shape, "origin")
        qe_flops = flops(shape, "qe")
        row = {
            "name": entry.get("name", f"{shape.d_in}x{shape.d_out}"),
            "s": shape.seq_len, "d_in": shape.d_in, "d_out": shape.d_out,
            "r": shape.rank, "n_experts": shape.n_experts,
            "origin_flops": base_flops, "qe_flops": qe_flops,
            "overhead_pct": 100.0 * (qe_flops - base_flops) / base_flops,
            "origin_params": params(shape, "origin", "detailed"),
            "qe_params_paper": params(shape, "qe", "paper") if shape.square else None,
            "qe_params_detailed": params(shape, "qe", "detailed"),
        }
        rows.append(row)

    if args.format == "json":
        text = json.dumps(rows, sort_keys=True, indent=2)
        if args.out:
            Path(args.out).write_text(text + "\n")
            print(f"wrote {args.out}")
        else:
            print(text)
        return EXIT_OK

    fields = ["name", "s", "d_in", "d_out", "r", "n_experts", "origin_flops",
              "qe_flops", "overhead_pct", "origin_params", "qe_params_paper",
              "qe_params_detailed"]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if row[k] is None else row[k]) for k in fields})
        print(f"wrote {args.out}")
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in fields})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qe", description="Quantization error-compensation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="calibrate, build experts, write a package")
    q.add_argument("--model", required=True, help="model manifest JSON")
    q.add_argument("--calib", required=True,
                   help="tensor file, JSON map, or 'synth'")
    q.add_argument("--wbits", type=int, default=4)
    q.add_argument("--abits", type=int, default=8,
                   help="activation bits; 0 or 16 keep full precision")
    q.add_argument("--weight-mode", choices=["channel", "group"], default="channel")
    q.add_argument("--group-size", type=int, default=128)
    q.add_argument("--k", type=int, default=32)
    q.add_argument("--experts", type=int, default=8)
    q.add_argument("--rank", type=int, default=64)
    q.add_argument("--refine", action="store_true")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--jobs", type=int, default=1)
    q.add_argument("--calib-tokens", type=int, default=128)
    q.add_argument("--modalities", type=int, default=2)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("eval", help="evaluate variants on held-out activations")
    e.add_argument("--package", required=True)
    e.add_argument("--calib", required=True)
    e.add_argument("--variants", default="rtn,shared,qe")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="channel frequency and overlap statistics")
    a.add_argument("--calib", required=True)
    a.add_argument("--weights", required=True)
    a.add_argument("--k", type=int, default=32)
    a.add_argument("--out", default="analysis")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("cost", help="analytic FLOPs/parameter table")
    c.add_argument("--shapes", default=None, help="JSON list of layer shapes")
    c.add_argument("--format", choices=["csv", "json"], default="csv")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingMemberError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (SingularMatrixError, NumericFailureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidInputError, ConfigError, QEError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

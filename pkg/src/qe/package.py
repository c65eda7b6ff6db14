"""Package directory layout: manifest plus tensor files per layer.

A package is a directory with ``manifest.json`` at the top, one tensor
subdirectory per layer, per-layer calibration stats under ``stats/``, and
(when refinement ran) loss-history CSVs under ``refine/``. The manifest
embeds the resolved run configuration so evaluation reports are fully
reproducible. All writes are deterministic: sorted JSON keys, fixed file
order, float64 payloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calib import ChannelStats
from .errors import InvalidInputError
from .experts import (ExpertPack, LowRankAdapter, Router, RoutedExperts,
                      SharedExpert, assemble_pack)
from .quantizer import QuantScheme, QuantizedWeight
from .refine import HistoryRow
from .tensorfile import read_tensor, read_tensor_header, write_tensor

__all__ = ["LayerBuild", "LoadedLayer", "write_package", "read_package",
           "write_history_csv", "MANIFEST_NAME"]

MANIFEST_NAME = "manifest.json"
FORMAT_NAME = "qe-package"
FORMAT_VERSION = 1


@dataclass
class LayerBuild:
    """One built layer ready for serialization."""

    name: str
    weight: np.ndarray
    pack: ExpertPack
    stats: ChannelStats | None = None
    history: list[HistoryRow] | None = None
    summary: dict | None = None


@dataclass
class LoadedLayer:
    name: str
    weight: np.ndarray
    pack: ExpertPack


def _layer_dir(name: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in name)
    return f"tensors/{safe}"


def write_history_csv(path: Path, history: list[HistoryRow]) -> None:
    lines = ["iter,lr,L,L_reg,L_cls"]
    for row in history:
        lines.append(f"{row.iteration},{row.lr:.17g},{row.loss:.17g},"
                     f"{row.l_reg:.17g},{row.l_cls:.17g}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def write_package(out_dir, layers: list[LayerBuild], config: dict) -> None:
    """Serialize built layers; a single writer keeps the manifest consistent."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_layers = []
    for layer in layers:
        pack = layer.pack
        base = _layer_dir(layer.name)
        refs: dict = {}

        def put(key: str, rel: str, arr: np.ndarray):
            write_tensor(out / rel, arr)
            refs[key] = rel

        put("weight", f"{base}/weight.qet", layer.weight)
        put("codes", f"{base}/codes.qet", pack.quantized.codes.astype(np.int32))
        put("scales", f"{base}/scales.qet", pack.quantized.scales.astype(np.float64))
        if pack.quantized.zero_points is not None:
            put("zero_points", f"{base}/zero_points.qet",
                pack.quantized.zero_points.astype(np.int32))
        else:
            refs["zero_points"] = None
        put("shared_up", f"{base}/shared_up.qet", pack.shared.adapter.up)
        put("shared_down", f"{base}/shared_down.qet", pack.shared.adapter.down)
        put("smooth_scale", f"{base}/smooth_scale.qet", pack.shared.smooth_scale)
        put("router", f"{base}/router.qet", pack.router.matrix)
        refs["routed_up"] = []
        refs["routed_down"] = []
        for i, adapter in enumerate(pack.routed.adapters):
            rel_up = f"{base}/routed_up_{i}.qet"
            rel_down = f"{base}/routed_down_{i}.qet"
            write_tensor(out / rel_up, adapter.up)
            write_tensor(out / rel_down, adapter.down)
            refs["routed_up"].append(rel_up)
            refs["routed_down"].append(rel_down)

        if layer.stats is not None:
            stats_rel = f"stats/{Path(base).name}.json"
            stats_path = out / stats_rel
            stats_path.parent.mkdir(parents=True, exist_ok=True)
            stats_path.write_text(json.dumps(layer.stats.to_dict(), sort_keys=True,
                                             indent=2) + "\n")
        if layer.history is not None:
            write_history_csv(out / "refine" / f"{Path(base).name}.csv", layer.history)

        manifest_layers.append({
            "name": layer.name,
            "d_in": pack.d_in,
            "d_out": pack.d_out,
            "k": pack.k,
            "ranks": {"shared": pack.shared_rank, "routed": pack.routed_rank},
            "n_experts": pack.n_experts,
            "scheme": pack.scheme.to_dict(),
            "c_s": [int(c) for c in pack.shared_channels],
            "c_r": [int(c) for c in pack.routed_channels],
            "clusters": [[int(c) for c in cluster] for cluster in pack.routed.clusters],
            "tensors": refs,
        })

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": config,
        "layers": manifest_layers,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _expect_shape(root: Path, rel: str, shape: tuple[int, ...], what: str) -> None:
    _, dims = read_tensor_header(root / rel)
    if dims != shape:
        raise InvalidInputError(
            f"manifest mismatch for {what}: declared {shape}, file has {dims}")


def _validate_layer_shapes(root: Path, entry: dict) -> None:
    d_in, d_out = entry["d_in"], entry["d_out"]
    r_s = entry["ranks"]["shared"]
    r_r = entry["ranks"]["routed"]
    n_experts = entry["n_experts"]
    refs = entry["tensors"]
    name = entry["name"]
    scheme = QuantScheme.from_dict(entry["scheme"])

    _expect_shape(root, refs["weight"], (d_out, d_in), f"{name}.weight")
    _expect_shape(root, refs["codes"], (d_out, d_in), f"{name}.codes")
    if scheme.weight_mode == "per_output_channel_symmetric":
        _expect_shape(root, refs["scales"], (d_out,), f"{name}.scales")
    else:
        n_groups = (d_in + scheme.group_size - 1) // scheme.group_size
        _expect_shape(root, refs["scales"], (d_out, n_groups), f"{name}.scales")
        _expect_shape(root, refs["zero_points"], (d_out, n_groups),
                      f"{name}.zero_points")
    _expect_shape(root, refs["shared_up"], (d_out, r_s), f"{name}.shared_up")
    _expect_shape(root, refs["shared_down"], (r_s, d_in), f"{name}.shared_down")
    _expect_shape(root, refs["smooth_scale"], (d_in,), f"{name}.smooth_scale")
    _expect_shape(root, refs["router"], (d_in, n_experts), f"{name}.router")
    if len(refs["routed_up"]) != n_experts or len(refs["routed_down"]) != n_experts:
        raise InvalidInputError(f"{name}: adapter reference count != n_experts")
    for i in range(n_experts):
        _expect_shape(root, refs["routed_up"][i], (d_out, r_r), f"{name}.routed_up[{i}]")
        _expect_shape(root, refs["routed_down"][i], (r_r, d_in), f"{name}.routed_down[{i}]")


def read_package(package_dir) -> tuple[dict, list[LoadedLayer]]:
    """Load and validate a package; shape checks run before tensor payloads
    are used for anything."""
    root = Path(package_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise InvalidInputError(f"{manifest_path}: no manifest found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{manifest_path}: invalid JSON at offset {exc.pos}: "
                                f"{exc.msg}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise InvalidInputError(f"{manifest_path}: unknown format "
                                f"{manifest.get('format')!r}")

    for entry in manifest["layers"]:
        _validate_layer_shapes(root, entry)

    layers = []
    for entry in manifest["layers"]:
        refs = entry["tensors"]
        scheme = QuantScheme.from_dict(entry["scheme"])
        weight = read_tensor(root / refs["weight"]).astype(np.float64)
        codes = read_tensor(root / refs["codes"])
        scales = read_tensor(root / refs["scales"])
        zero_points = None
        if refs.get("zero_points"):
            zero_points = read_tensor(root / refs["zero_points"])
        quantized = QuantizedWeight(codes=codes, scales=scales,
                                    zero_points=zero_points, scheme=scheme)
        shared = SharedExpert(
            adapter=LowRankAdapter(up=read_tensor(root / refs["shared_up"]),
                                   down=read_tensor(root / refs["shared_down"])),
            smooth_scale=read_tensor(root / refs["smooth_scale"]))
        adapters = [LowRankAdapter(up=read_tensor(root / refs["routed_up"][i]),
                                   down=read_tensor(root / refs["routed_down"][i]))
                    for i in range(entry["n_experts"])]
        clusters = [np.asarray(c, dtype=np.int64) for c in entry["clusters"]]
        pack = assemble_pack(
            quantized=quantized, shared=shared,
            routed=RoutedExperts(adapters=adapters, clusters=clusters),
            router=Router(matrix=read_tensor(root / refs["router"])),
            shared_rank=entry["ranks"]["shared"], routed_rank=entry["ranks"]["routed"],
            k=entry["k"], scheme=scheme, shared_channels=entry["c_s"],
            routed_channels=entry["c_r"])
        layers.append(LoadedLayer(name=entry["name"], weight=weight, pack=pack))
    return manifest["config"], layers

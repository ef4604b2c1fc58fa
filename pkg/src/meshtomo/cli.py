"""Command-line pipeline around the library.

Ten subcommands cover the full experimental loop: phantom generation, mesh
generation, forward projection, measurement corruption, warm-start inversion,
estimator training, coefficient estimation (oracle / oblique / learned),
reconstruction (subspace recombination or direct TV), Monte Carlo kernel
studies, and SNR evaluation reports.

Every command accepts ``--config FILE`` (a JSON object whose keys are the
long flag names with underscores) and long-form flags that override the file.
Each output directory receives a ``manifest.json`` echoing the resolved
configuration, its SHA-256 hash, and the seed; identical configurations
produce byte-identical outputs.

Exit codes: 0 success, 2 configuration error, 3 missing or unreadable input,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from .core import FormatError, Grid, Image, Seed, load_image, save_image
from .data import (ShapesConfig, gen_checkerboard, gen_shapes, load_dataset,
                   output_snr, save_dataset, shapes_manifest)
from .estimate import (Estimator, TrainConfig, build_oblique, estimate_coeffs,
                       load_estimator, oblique_coeffs, oracle_coeffs,
                       save_estimator, train_ensemble, train_estimator)
from .kernel import mc_expected_recon, save_radial_profile
from .mesh import (StackedBasis, load_mesh, mesh_with_k_triangles, rasterize,
                   save_mesh)
from .solve import SolveOptions, SolverError, nnls, solve_reformulated, tv_direct
from .tomo import (Measurement, add_gaussian_noise, build_ray_matrix, erase,
                   forward, load_measurement, place_sensors, save_measurement)

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    """Configuration schema violation; message names the offending field."""


# ---------------------------------------------------------------------------
# config resolution

def _float_or_inf(value):
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinity", "+inf"):
        return math.inf
    return float(value)


def _coerce(field, typ, value):
    try:
        if typ is bool:
            if isinstance(value, bool):
                return value
            raise ValueError("expected a boolean")
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field '{field}': {exc}") from exc


def _resolve(args, fields):
    """Merge file config and CLI flags; CLI wins, then file, then default.

    ``fields`` is a list of (name, type, default, required); a missing
    required value or an unknown file key raises ConfigError naming the field.
    """
    file_cfg = {}
    if getattr(args, "config", None):
        path = args.config
        if not os.path.isfile(path):
            raise FileNotFoundError(path)
        with open(path, "r", encoding="utf-8") as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config file {path}: top level must be an object")
        known = {name for name, _, _, _ in fields}
        for key in file_cfg:
            if key not in known:
                raise ConfigError(f"unknown config field '{key}'")
    cfg = {}
    for name, typ, default, required in fields:
        value = getattr(args, name, None)
        if value is None:
            value = file_cfg.get(name, default)
        if value is None:
            if required:
                raise ConfigError(f"missing required field '{name}'")
            cfg[name] = None
            continue
        cfg[name] = _coerce(name, typ, value)
    return cfg


def _jsonable(cfg):
    out = {}
    for key, value in cfg.items():
        if isinstance(value, float) and math.isinf(value):
            out[key] = "inf"
        else:
            out[key] = value
    return out


def _manifest_payload(command, cfg, extra=None):
    payload = {"command": command, "config": _jsonable(cfg)}
    canonical = json.dumps(payload["config"], sort_keys=True,
                           separators=(",", ":")).encode("ascii")
    payload["config_sha256"] = hashlib.sha256(canonical).hexdigest()
    if extra:
        payload.update(extra)
    return payload


def _write_manifest(out_dir, command, cfg, extra=None):
    payload = _manifest_payload(command, cfg, extra)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="ascii") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _require_dir(path, field):
    if path is None:
        raise ConfigError(f"missing required field '{field}'")
    if not os.path.isdir(path):
        raise FileNotFoundError(path)
    return path


def _listed(dirpath, suffix):
    names = sorted(n for n in os.listdir(dirpath)
                   if n.endswith(suffix) and n != "manifest.json")
    if not names:
        raise FileNotFoundError(f"{dirpath}: no {suffix} files")
    return [os.path.join(dirpath, n) for n in names]


def _load_meshes(dirpath):
    return [load_mesh(p) for p in _listed(dirpath, ".json")]


def _load_images_dir(dirpath):
    return [load_image(p) for p in _listed(dirpath, ".f32raw")]


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_data(args):
    cfg = _resolve(args, [
        ("count", int, 1, True),
        ("grid_side", int, None, True),
        ("kind", str, "shapes", True),
        ("shapes_min", int, 2, True),
        ("shapes_max", int, 6, True),
        ("intensity_min", float, 0.2, True),
        ("intensity_max", float, 1.0, True),
        ("cells", int, None, False),
        ("seed", int, 0, True),
        ("out", str, None, True),
    ])
    if cfg["kind"] == "shapes":
        try:
            scfg = ShapesConfig(cfg["count"], cfg["grid_side"],
                                (cfg["shapes_min"], cfg["shapes_max"]),
                                intensity_range=(cfg["intensity_min"], cfg["intensity_max"]),
                                seed=Seed(cfg["seed"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        images = gen_shapes(scfg)
        extra = shapes_manifest(scfg)
    elif cfg["kind"] == "checkerboard":
        if cfg["cells"] is None:
            raise ConfigError("missing required field 'cells' for kind=checkerboard")
        try:
            images = [gen_checkerboard(cfg["grid_side"], cfg["cells"])] * cfg["count"]
        except ValueError as exc:
            raise ConfigError(f"field 'cells': {exc}") from exc
        extra = {"kind": "checkerboard", "cells": cfg["cells"]}
    else:
        raise ConfigError(f"field 'kind': expected 'shapes' or 'checkerboard', "
                          f"got {cfg['kind']!r}")
    save_dataset(images, cfg["out"], _manifest_payload("gen-data", cfg, extra))
    print(f"wrote {len(images)} images to {cfg['out']}")
    return EXIT_OK


def _cmd_gen_mesh(args):
    cfg = _resolve(args, [
        ("triangles", int, None, True),
        ("subspaces", int, 1, True),
        ("seed", int, 0, True),
        ("out", str, None, True),
    ])
    if cfg["triangles"] < 2:
        raise ConfigError("field 'triangles': need at least 2")
    if cfg["subspaces"] < 1:
        raise ConfigError("field 'subspaces': need at least 1")
    os.makedirs(cfg["out"], exist_ok=True)
    seed = Seed(cfg["seed"])
    counts = []
    for lam in range(cfg["subspaces"]):
        mesh = mesh_with_k_triangles(cfg["triangles"], seed.derive(lam))
        save_mesh(mesh, os.path.join(cfg["out"], f"mesh_{lam:03d}.json"))
        counts.append(mesh.triangle_count)
    _write_manifest(cfg["out"], "gen-mesh", cfg, {"triangle_counts": counts})
    print(f"wrote {cfg['subspaces']} meshes ({cfg['triangles']} triangles) to {cfg['out']}")
    return EXIT_OK


def _cmd_forward(args):
    cfg = _resolve(args, [
        ("data", str, None, True),
        ("sensors", int, None, True),
        ("grid_side", int, None, False),
        ("seed", int, 0, True),
        ("out", str, None, True),
    ])
    _require_dir(cfg["data"], "data")
    images, man = load_dataset(cfg["data"])
    side = images[0].grid.side
    if cfg["grid_side"] is not None and cfg["grid_side"] != side:
        raise ConfigError(f"field 'grid_side': dataset is {side}x{side}, "
                          f"got {cfg['grid_side']}")
    cfg["grid_side"] = side
    rm = build_ray_matrix(place_sensors(cfg["sensors"]), Grid(side))
    os.makedirs(cfg["out"], exist_ok=True)
    for i, img in enumerate(images):
        save_measurement(forward(rm, img), os.path.join(cfg["out"], f"y_{i:05d}.csv"))
    _write_manifest(cfg["out"], "forward", cfg,
                    {"count": len(images), "rows": rm.m})
    print(f"projected {len(images)} images through {rm.m} rays to {cfg['out']}")
    return EXIT_OK


def _cmd_corrupt(args):
    cfg = _resolve(args, [
        ("measurements", str, None, True),
        ("snr_db", _float_or_inf, math.inf, True),
        ("erasure_p", float, 0.0, True),
        ("seed", int, 0, True),
        ("out", str, None, True),
    ])
    if not (0.0 <= cfg["erasure_p"] <= 1.0):
        raise ConfigError("field 'erasure_p': must be in [0, 1]")
    _require_dir(cfg["measurements"], "measurements")
    paths = _listed(cfg["measurements"], ".csv")
    seed = Seed(cfg["seed"])
    os.makedirs(cfg["out"], exist_ok=True)
    for i, path in enumerate(paths):
        y = load_measurement(path)
        branch = seed.derive(i)
        if math.isfinite(cfg["snr_db"]):
            y = add_gaussian_noise(y, cfg["snr_db"], branch.derive(0))
        if cfg["erasure_p"] > 0.0:
            y = erase(y, cfg["erasure_p"], branch.derive(1))
        save_measurement(y, os.path.join(cfg["out"], f"y_{i:05d}.csv"))
    _write_manifest(cfg["out"], "corrupt", cfg, {"count": len(paths)})
    print(f"corrupted {len(paths)} measurement files to {cfg['out']}")
    return EXIT_OK


def _cmd_nnls(args):
    cfg = _resolve(args, [
        ("measurements", str, None, True),
        ("sensors", int, None, True),
        ("grid_side", int, None, True),
        ("max_iters", int, 500, True),
        ("tol", float, 1e-9, True),
        ("seed", int, 0, True),
        ("out", str, None, True),
    ])
    _require_dir(cfg["measurements"], "measurements")
    paths = _listed(cfg["measurements"], ".csv")
    rm = build_ray_matrix(place_sensors(cfg["sensors"]), Grid(cfg["grid_side"]))
    opts = _solve_options(cfg)
    os.makedirs(cfg["out"], exist_ok=True)
    for i, path in enumerate(paths):
        img = nnls(rm, load_measurement(path), opts)
        save_image(img, os.path.join(cfg["out"], f"warm_{i:05d}.f32raw"), "f32raw")
    _write_manifest(cfg["out"], "nnls", cfg, {"count": len(paths)})
    print(f"solved {len(paths)} warm starts to {cfg['out']}")
    return EXIT_OK


def _solve_options(cfg, tv_weight=0.0):
    try:
        return SolveOptions(max_iters=cfg["max_iters"], tol=cfg["tol"],
                            tv_weight=tv_weight)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _cmd_train(args):
    cfg = _resolve(args, [
        ("data", str, None, True),
        ("warm", str, None, True),
        ("meshes", str, None, True),
        ("grid_side", int, None, True),
        ("estimator_kind", str, "per-mesh-affine", True),
        ("epochs", int, 80, True),
        ("batch_size", int, 32, True),
        ("lr", float, 1e-3, True),
        ("optimizer", str, "adam", True),
        ("validation_fraction", float, 0.2, True),
        ("weight_decay", float, 0.0, True),
        ("seed", int, 0, True),
        ("out", str, None, True),
    ])
    _require_dir(cfg["data"], "data")
    _require_dir(cfg["warm"], "warm")
    _require_dir(cfg["meshes"], "meshes")
    images, _ = load_dataset(cfg["data"])
    warms = _load_images_dir(cfg["warm"])
    if len(images) != len(warms):
        raise ConfigError(f"field 'warm': {len(warms)} warm starts for "
                          f"{len(images)} images")
    grid = Grid(cfg["grid_side"])
    bases = [rasterize(m, grid) for m in _load_meshes(cfg["meshes"])]
    dataset = list(zip(images, warms))
    try:
        tcfg = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                           lr=cfg["lr"], optimizer=cfg["optimizer"],
                           validation_fraction=cfg["validation_fraction"],
                           weight_decay=cfg["weight_decay"], seed=Seed(cfg["seed"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    os.makedirs(cfg["out"], exist_ok=True)
    if cfg["estimator_kind"] == "per-mesh-affine":
        ests = train_ensemble(dataset, StackedBasis(bases), tcfg)
    elif cfg["estimator_kind"] == "shared-pooled":
        ests = [train_estimator(dataset, StackedBasis(bases), tcfg, "shared-pooled")]
    else:
        raise ConfigError(f"field 'estimator_kind': expected 'per-mesh-affine' or "
                          f"'shared-pooled', got {cfg['estimator_kind']!r}")
    val_losses = []
    for i, est in enumerate(ests):
        save_estimator(est, os.path.join(cfg["out"], f"estimator_{i:03d}.est"))
        val_losses.append(float(est.history.val_loss[-1]))
    _write_manifest(cfg["out"], "train", cfg,
                    {"count": len(ests), "final_val_loss": val_losses})
    print(f"trained {len(ests)} estimator(s) to {cfg['out']} "
          f"(final val loss {', '.join(f'{v:.3e}' for v in val_losses)})")
    return EXIT_OK


def _cmd_estimate(args):
    cfg = _resolve(args, [
        ("backend", str, None, True),
        ("meshes", str, None, True),
        ("grid_side", int, None, True),
        ("data", str, None, False),
        ("measurements", str, None, False),
        ("sensors", int, None, False),
        ("warm", str, None, False),
        ("estimators", str, None, False),
        ("seed", int, 0, True),
        ("out", str, None, True),
    ])
    _require_dir(cfg["meshes"], "meshes")
    grid = Grid(cfg["grid_side"])
    bases = [rasterize(m, grid) for m in _load_meshes(cfg["meshes"])]
    backend = cfg["backend"]
    if backend == "oracle":
        _require_dir(cfg["data"], "data")
        images, _ = load_dataset(cfg["data"])
        rows = [[oracle_coeffs(b, x) for b in bases] for x in images]
    elif backend == "oblique":
        if cfg["sensors"] is None:
            raise ConfigError("missing required field 'sensors' for backend=oblique")
        _require_dir(cfg["measurements"], "measurements")
        ys = [load_measurement(p) for p in _listed(cfg["measurements"], ".csv")]
        rm = build_ray_matrix(place_sensors(cfg["sensors"]), grid)
        try:
            ops = [build_oblique(rm, b) for b in bases]
        except ValueError as exc:
            raise SolverError(str(exc)) from exc
        rows = [[oblique_coeffs(op, y) for op in ops] for y in ys]
    elif backend == "learned":
        _require_dir(cfg["warm"], "warm")
        _require_dir(cfg["estimators"], "estimators")
        warms = _load_images_dir(cfg["warm"])
        ests = [load_estimator(p) for p in _listed(cfg["estimators"], ".est")]
        if len(ests) == 1 and ests[0].kind == "shared-pooled":
            ests = ests * len(bases)
        if len(ests) != len(bases):
            raise ConfigError(f"field 'estimators': {len(ests)} estimators for "
                              f"{len(bases)} meshes")
        try:
            rows = [[estimate_coeffs(e, b, w) for e, b in zip(ests, bases)]
                    for w in warms]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        raise ConfigError(f"field 'backend': expected oracle|oblique|learned, "
                          f"got {backend!r}")
    os.makedirs(cfg["out"], exist_ok=True)
    for i, per_mesh in enumerate(rows):
        for lam, q in enumerate(per_mesh):
            save_measurement(Measurement(q),
                             os.path.join(cfg["out"], f"q_{i:05d}_{lam:03d}.csv"))
    _write_manifest(cfg["out"], "estimate", cfg,
                    {"count": len(rows), "subspaces": len(bases)})
    print(f"estimated {len(rows)} x {len(bases)} coefficient files to {cfg['out']}")
    return EXIT_OK


def _cmd_reconstruct(args):
    cfg = _resolve(args, [
        ("method", str, "recombine", True),
        ("coeffs", str, None, False),
        ("meshes", str, None, False),
        ("measurements", str, None, False),
        ("sensors", int, None, False),
        ("grid_side", int, None, True),
        ("tv_weight", float, 0.0, True),
        ("max_iters", int, 500, True),
        ("tol", float, 1e-9, True),
        ("seed", int, 0, True),
        ("out", str, None, True),
    ])
    grid = Grid(cfg["grid_side"])
    opts = _solve_options(cfg, tv_weight=cfg["tv_weight"])
    os.makedirs(cfg["out"], exist_ok=True)
    if cfg["method"] == "recombine":
        _require_dir(cfg["coeffs"], "coeffs")
        _require_dir(cfg["meshes"], "meshes")
        bases = [rasterize(m, grid) for m in _load_meshes(cfg["meshes"])]
        stack = StackedBasis(bases)
        paths = _listed(cfg["coeffs"], ".csv")
        by_image = {}
        for path in paths:
            stem = os.path.basename(path)[:-4]
            try:
                _, img_id, lam_id = stem.split("_")
                by_image.setdefault(int(img_id), {})[int(lam_id)] = path
            except ValueError:
                raise FormatError(f"{path}: expected name q_IIIII_LLL.csv") from None
        count = 0
        for i in sorted(by_image):
            per_mesh = by_image[i]
            if sorted(per_mesh) != list(range(len(bases))):
                raise FormatError(f"{cfg['coeffs']}: image {i} has coefficient files "
                                  f"for meshes {sorted(per_mesh)}, expected "
                                  f"0..{len(bases) - 1}")
            q = np.concatenate([load_measurement(per_mesh[lam]).values
                                for lam in range(len(bases))])
            res = solve_reformulated(stack, q, opts)
            save_image(res.image, os.path.join(cfg["out"], f"recon_{i:05d}.f32raw"),
                       "f32raw")
            count += 1
    elif cfg["method"] == "tv-direct":
        if cfg["sensors"] is None:
            raise ConfigError("missing required field 'sensors' for method=tv-direct")
        _require_dir(cfg["measurements"], "measurements")
        rm = build_ray_matrix(place_sensors(cfg["sensors"]), grid)
        paths = _listed(cfg["measurements"], ".csv")
        for i, path in enumerate(paths):
            res = tv_direct(rm, load_measurement(path), opts)
            save_image(res.image, os.path.join(cfg["out"], f"recon_{i:05d}.f32raw"),
                       "f32raw")
        count = len(paths)
    else:
        raise ConfigError(f"field 'method': expected 'recombine' or 'tv-direct', "
                          f"got {cfg['method']!r}")
    _write_manifest(cfg["out"], "reconstruct", cfg, {"count": count})
    print(f"reconstructed {count} images ({cfg['method']}) to {cfg['out']}")
    return EXIT_OK


def _cmd_kernel_mc(args):
    cfg = _resolve(args, [
        ("triangles", int, None, True),
        ("subspaces", int, None, True),
        ("trials", int, None, True),
        ("grid_side", int, 32, True),
        ("pixel", str, "center", True),
        ("seed", int, 0, True),
        ("out", str, None, True),
    ])
    grid = Grid(cfg["grid_side"])
    if cfg["pixel"] == "center":
        i = j = grid.side // 2
    else:
        try:
            i, j = (int(v) for v in cfg["pixel"].split(","))
        except ValueError:
            raise ConfigError("field 'pixel': expected 'center' or 'i,j'") from None
    if not (0 <= i < grid.side and 0 <= j < grid.side):
        raise ConfigError(f"field 'pixel': ({i},{j}) outside {grid.side}x{grid.side}")
    x = Image.zeros(grid)
    x.values[i * grid.side + j] = 1.0
    try:
        est = mc_expected_recon(x, cfg["triangles"], cfg["subspaces"],
                                cfg["trials"], Seed(cfg["seed"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    os.makedirs(cfg["out"], exist_ok=True)
    save_image(est.mean_image, os.path.join(cfg["out"], "mean.f32raw"), "f32raw")
    save_image(est.mean_image, os.path.join(cfg["out"], "mean.pgm"), "pgm16")
    save_radial_profile(est.radial_profile, os.path.join(cfg["out"], "profile.csv"))
    _write_manifest(cfg["out"], "kernel-mc", cfg,
                    {"peak": float(est.mean_image.values.max())})
    print(f"kernel study (K={cfg['triangles']}, subspaces={cfg['subspaces']}, "
          f"T={cfg['trials']}) written to {cfg['out']}")
    return EXIT_OK


def _write_panel(mats, path):
    """Side-by-side 16-bit PGM of equally sized matrices, one separator column."""
    side = mats[0].shape[0]
    lo = min(float(m.min()) for m in mats)
    hi = max(float(m.max()) for m in mats)
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    sep = np.full((side, 1), 65535, dtype=np.uint16)
    cols = []
    for idx, m in enumerate(mats):
        if idx:
            cols.append(sep)
        cols.append(np.round((m - lo) * scale).astype(np.uint16))
    panel = np.flipud(np.hstack(cols))
    with open(path, "wb") as fh:
        fh.write(f"P5 {panel.shape[1]} {panel.shape[0]} 65535\n".encode("ascii"))
        fh.write(panel.astype(">u2").tobytes())


def _cmd_evaluate(args):
    cfg = _resolve(args, [
        ("data", str, None, True),
        ("seed", int, 0, True),
        ("out", str, None, True),
    ])
    recons = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        if isinstance(file_cfg, dict) and "recons" in file_cfg:
            if not isinstance(file_cfg["recons"], dict):
                raise ConfigError("field 'recons': expected an object label -> dir")
            recons.update(file_cfg["recons"])
    for spec in args.recon or []:
        label, eq, path = spec.partition("=")
        if not eq or not label or not path:
            raise ConfigError(f"field 'recon': expected LABEL=DIR, got {spec!r}")
        recons[label] = path
    if not recons:
        raise ConfigError("missing required field 'recon' (repeat --recon LABEL=DIR)")
    _require_dir(cfg["data"], "data")
    truth, _ = load_dataset(cfg["data"])
    labels = sorted(recons)
    columns = {}
    for label in labels:
        imgs = _load_images_dir(_require_dir(recons[label], f"recon '{label}'"))
        if len(imgs) != len(truth):
            raise ConfigError(f"field 'recon': '{label}' has {len(imgs)} images, "
                              f"dataset has {len(truth)}")
        columns[label] = imgs
    os.makedirs(cfg["out"], exist_ok=True)
    snrs = {label: [] for label in labels}
    for i, x in enumerate(truth):
        for label in labels:
            snrs[label].append(output_snr(x, columns[label][i]))
        _write_panel([x.as_matrix()] + [columns[label][i].as_matrix() for label in labels],
                     os.path.join(cfg["out"], f"panel_{i:05d}.pgm"))
    report = os.path.join(cfg["out"], "report.csv")
    with open(report, "w", encoding="ascii", newline="\n") as fh:
        fh.write("image," + ",".join(labels) + "\n")
        for i in range(len(truth)):
            fh.write(f"{i:05d}," + ",".join(f"{snrs[label][i]:.6f}" for label in labels) + "\n")
        fh.write("mean," + ",".join(f"{float(np.mean(snrs[label])):.6f}" for label in labels) + "\n")
    _write_manifest(cfg["out"], "evaluate",
                    {**cfg, "recons": {k: recons[k] for k in labels}},
                    {"count": len(truth),
                     "mean_snr_db": {label: float(np.mean(snrs[label])) for label in labels}})
    for label in labels:
        print(f"{label}: mean output SNR {float(np.mean(snrs[label])):.2f} dB "
              f"over {len(truth)} images")
    print(f"report written to {report}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_flags(sub, names):
    flags = {
        "count": (int, "number of images"),
        "grid_side": (int, "pixels per image side"),
        "kind": (str, "dataset kind: shapes | checkerboard"),
        "shapes_min": (int, "minimum shapes per image"),
        "shapes_max": (int, "maximum shapes per image"),
        "intensity_min": (float, "lower intensity bound"),
        "intensity_max": (float, "upper intensity bound"),
        "cells": (int, "checkerboard cells per side"),
        "seed": (int, "RNG seed (recorded in the manifest)"),
        "out": (str, "output directory"),
        "triangles": (int, "triangles per mesh (K)"),
        "subspaces": (int, "number of meshes"),
        "data": (str, "dataset directory"),
        "sensors": (int, "sensors on the boundary circle"),
        "measurements": (str, "measurement directory"),
        "snr_db": (str, "input SNR in dB, or 'inf' for noiseless"),
        "erasure_p": (float, "independent erasure probability"),
        "max_iters": (int, "solver iteration cap"),
        "tol": (float, "solver tolerance"),
        "warm": (str, "warm-start image directory"),
        "meshes": (str, "mesh directory"),
        "estimator_kind": (str, "per-mesh-affine | shared-pooled"),
        "epochs": (int, "training epochs"),
        "batch_size": (int, "minibatch size"),
        "lr": (float, "learning rate"),
        "optimizer": (str, "adam | sgd"),
        "validation_fraction": (float, "held-out fraction during training"),
        "weight_decay": (float, "L2 penalty on weights"),
        "backend": (str, "oracle | oblique | learned"),
        "estimators": (str, "trained estimator directory"),
        "method": (str, "recombine | tv-direct"),
        "coeffs": (str, "coefficient directory"),
        "tv_weight": (float, "TV regularization weight"),
        "trials": (int, "Monte Carlo trials"),
        "pixel": (str, "'center' or 'i,j' test pixel"),
    }
    sub.add_argument("--config", help="JSON config file (flags override it)")
    for name in names:
        typ, help_text = flags[name]
        sub.add_argument("--" + name.replace("_", "-"), dest=name, type=typ,
                         help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshtomo",
        description="Random-mesh subspace tomography pipeline.")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("gen-data", help="generate a phantom dataset")
    _add_flags(sub, ["count", "grid_side", "kind", "shapes_min", "shapes_max",
                     "intensity_min", "intensity_max", "cells", "seed", "out"])
    sub.set_defaults(func=_cmd_gen_data)

    sub = subs.add_parser("gen-mesh", help="generate random Delaunay meshes")
    _add_flags(sub, ["triangles", "subspaces", "seed", "out"])
    sub.set_defaults(func=_cmd_gen_mesh)

    sub = subs.add_parser("forward", help="project a dataset through the ray matrix")
    _add_flags(sub, ["data", "sensors", "grid_side", "seed", "out"])
    sub.set_defaults(func=_cmd_forward)

    sub = subs.add_parser("corrupt", help="add noise and erasures to measurements")
    _add_flags(sub, ["measurements", "snr_db", "erasure_p", "seed", "out"])
    sub.set_defaults(func=_cmd_corrupt)

    sub = subs.add_parser("nnls", help="box-constrained least-squares warm starts")
    _add_flags(sub, ["measurements", "sensors", "grid_side", "max_iters", "tol",
                     "seed", "out"])
    sub.set_defaults(func=_cmd_nnls)

    sub = subs.add_parser("train", help="fit coefficient estimators")
    _add_flags(sub, ["data", "warm", "meshes", "grid_side", "estimator_kind",
                     "epochs", "batch_size", "lr", "optimizer",
                     "validation_fraction", "weight_decay", "seed", "out"])
    sub.set_defaults(func=_cmd_train)

    sub = subs.add_parser("estimate", help="estimate subspace coefficients")
    _add_flags(sub, ["backend", "meshes", "grid_side", "data", "measurements",
                     "sensors", "warm", "estimators", "seed", "out"])
    sub.set_defaults(func=_cmd_estimate)

    sub = subs.add_parser("reconstruct", help="recombine coefficients or invert directly")
    _add_flags(sub, ["method", "coeffs", "meshes", "measurements", "sensors",
                     "grid_side", "tv_weight", "max_iters", "tol", "seed", "out"])
    sub.set_defaults(func=_cmd_reconstruct)

    sub = subs.add_parser("kernel-mc", help="Monte Carlo expected-reconstruction study")
    _add_flags(sub, ["triangles", "subspaces", "trials", "grid_side", "pixel",
                     "seed", "out"])
    sub.set_defaults(func=_cmd_kernel_mc)

    sub = subs.add_parser("evaluate", help="output-SNR report and inspection panels")
    _add_flags(sub, ["data", "seed", "out"])
    sub.add_argument("--recon", action="append", metavar="LABEL=DIR",
                     help="reconstruction directory to score (repeatable)")
    sub.set_defaults(func=_cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FormatError as exc:
        print(f"unreadable input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except SolverError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline: data generation, training, geometry, topology.

Every command takes an INI-style config (sections [data], [model],
[train], [geometry], [tda], [eval]; unknown keys rejected) and writes
its artifact plus a ``.config`` echo of the fully resolved settings and
a ``.manifest`` with content hashes.  Exit codes: 0 success, 2 config
error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import os
import sys
import time

import numpy as np

from . import evaluation, geo_multi, manifolds, tda
from .atlas import Atlas, TrainConfig, history_to_csv, train
from .errors import (ConfigError, FlowAtlasError, NumericalError,
                     OffManifoldError)
from .flows import ChartFlow

DEFAULTS = {
    "data": {
        "manifold": "circle",
        "distribution": "uniform",
        "n": "12000",
        "seed": "0",
        "radius": "1.0",
        "major_radius": "2.0",
        "minor_radius": "1.0",
        "vmf_kappa": "5.0",
        "bvm_concentration": "1.0",
    },
    "model": {
        "charts": "4",
        "latent_dim": "1",
        "ambient_dim": "2",
        "g_layers": "3",
        "h_layers": "9",
        "hidden": "16,16",
        "s_max": "2.0",
        "seed": "0",
        "resp_threshold": "0.05",
        "lambda_recon": "1000.0",
        "lambda_balance": "0.0",
    },
    "train": {
        "mode": "EM",
        "epochs": "1000",
        "batch_size": "256",
        "learning_rate": "3e-4",
        "seed": "0",
        "pretrain_epochs": "200",
        "patience": "50",
        "val_start": "100",
        "val_fraction": "0.1",
        "verbose": "0",
    },
    "geometry": {
        "solver": "euler",
        "steps": "20",
        "substeps": "5",
        "spline_controls": "8",
        "spline_samples": "64",
        "iters": "300",
        "lr": "0.02",
        "resp_refresh": "10",
        "chunk": "512",
    },
    "tda": {
        "max_dim": "1",
        "max_radius": "",
    },
    "eval": {
        "subsamples": "5",
        "batch": "1024",
        "eval_points": "100",
        "pair_limit": "",
        "seed": "0",
    },
}


def load_config(path):
    parser = configparser.ConfigParser()
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser[section].items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            cfg[section][key] = value
    return cfg


def config_text(cfg):
    lines = []
    for section in sorted(cfg):
        lines.append(f"[{section}]")
        for key in sorted(cfg[section]):
            lines.append(f"{key} = {cfg[section][key]}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg):
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()[:12]


def _file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()[:12]


def _write_artifacts(out, cfg, inputs=()):
    with open(out + ".config", "w") as fh:
        fh.write(config_text(cfg))
    lines = [f"config {config_hash(cfg)}",
             f"output {_file_hash(out)}",
             f"timestamp {int(time.time())}"]
    for path in inputs:
        lines.append(f"input {os.path.basename(path)} {_file_hash(path)}")
    with open(out + ".manifest", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _manifold_spec(cfg):
    d = cfg["data"]
    return manifolds.ManifoldSpec(d["manifold"], radius=float(d["radius"]),
                                  major_radius=float(d["major_radius"]),
                                  minor_radius=float(d["minor_radius"]))


def _distribution_spec(cfg):
    d = cfg["data"]
    return manifolds.DistributionSpec(d["distribution"],
                                      vmf_kappa=float(d["vmf_kappa"]),
                                      bvm_concentration=float(d["bvm_concentration"]))


def _write_points_csv(out, X, cfg, label):
    with open(out, "w") as fh:
        fh.write(f"# flowatlas {label} config={config_hash(cfg)}\n")
        for row in np.atleast_2d(X):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _read_points_csv(path):
    return np.atleast_2d(np.loadtxt(path, delimiter=",", comments="#", ndmin=2))


def _build_atlas(cfg):
    m = cfg["model"]
    hidden = tuple(int(h) for h in m["hidden"].split(","))
    charts = [ChartFlow(int(m["latent_dim"]), int(m["ambient_dim"]),
                        n_g_layers=int(m["g_layers"]), n_h_layers=int(m["h_layers"]),
                        hidden=hidden, s_max=float(m["s_max"]),
                        seed=int(m["seed"]) + c)
              for c in range(int(m["charts"]))]
    return Atlas(charts, resp_threshold=float(m["resp_threshold"]),
                 lambda_recon=float(m["lambda_recon"]),
                 lambda_balance=float(m["lambda_balance"]))


def _load_atlas(path):
    with open(path) as fh:
        return Atlas.load(fh)


def cmd_gen(cfg, out):
    spec = _manifold_spec(cfg)
    dist = _distribution_spec(cfg)
    X = manifolds.sample_dataset(spec, dist, int(cfg["data"]["n"]),
                                 seed=int(cfg["data"]["seed"]))
    _write_points_csv(out, X, cfg, f"dataset {spec.kind} {dist.kind}")
    _write_artifacts(out, cfg)
    print(f"wrote {len(X)} points in R^{X.shape[1]} to {out}")
    print(f"mean norm {np.mean(np.linalg.norm(X, axis=1)):.6g}")
    return 0


def cmd_train(cfg, data_path, out):
    X = _read_points_csv(data_path)
    t = cfg["train"]
    rng = np.random.default_rng(int(t["seed"]))
    order = rng.permutation(len(X))
    n_val = max(1, int(len(X) * float(t["val_fraction"])))
    X_val, X_train = X[order[:n_val]], X[order[n_val:]]
    mode = t["mode"].upper()
    if mode == "MULT":
        mode = "EM"
    tc = TrainConfig(mode=mode, epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                     learning_rate=float(t["learning_rate"]), seed=int(t["seed"]),
                     pretrain_epochs=int(t["pretrain_epochs"]), patience=int(t["patience"]),
                     val_start=int(t["val_start"]))
    atlas = _build_atlas(cfg)
    history = train(atlas, X_train, X_val, tc, verbose=bool(int(t["verbose"])))
    with open(out, "w") as fh:
        atlas.save(fh)
    with open(out + ".history.csv", "w") as fh:
        fh.write(history_to_csv(history))
    _write_artifacts(out, cfg, [data_path])
    print(f"trained {atlas.n_charts} charts for {len(history)} epochs; model in {out}")
    return 0


def cmd_eval(cfg, model_path, data_path, out):
    atlas = _load_atlas(model_path)
    X = _read_points_csv(data_path)
    e = cfg["eval"]
    spec = _manifold_spec(cfg)
    n_eval = int(e["eval_points"])
    eval_points = manifolds.evaluation_points(spec, n_eval) if n_eval else None
    pair_limit = int(e["pair_limit"]) if e["pair_limit"] else None
    g = cfg["geometry"]
    rep = evaluation.evaluate_model(
        atlas, X, manifold_spec=spec, eval_points=eval_points,
        seed=int(e["seed"]), n_subsamples=int(e["subsamples"]),
        ot_batch=int(e["batch"]), pair_limit=pair_limit,
        exp_steps=int(g["steps"]), logmap_iters=int(g["iters"]),
        logmap_refresh=int(g["resp_refresh"]))
    with open(out, "w") as fh:
        fh.write(f"# config {config_hash(cfg)}\n")
        fh.write(rep.to_text())
        fh.write(rep.to_csv_row(spec.kind) + "\n")
    _write_artifacts(out, cfg, [model_path, data_path])
    print(rep.to_text(), end="")
    return 0


def cmd_sample(cfg, model_path, out, n):
    atlas = _load_atlas(model_path)
    X = geo_multi.sample_atlas(atlas, n, seed=int(cfg["eval"]["seed"]))
    _write_points_csv(out, X, cfg, "samples")
    _write_artifacts(out, cfg, [model_path])
    print(f"wrote {n} samples to {out}")
    return 0


def _run_solver(cfg, atlas, X0, V0):
    g = cfg["geometry"]
    solver = g["solver"]
    if solver == "euler":
        return geo_multi.exp_map_euler(atlas, X0, V0, T=int(g["steps"]),
                                       substeps=int(g["substeps"]))
    if solver == "hard_switch":
        return geo_multi.exp_map_hard_switch(atlas, X0, V0,
                                             steps=int(g["steps"]) * int(g["substeps"]))
    if solver == "ambient":
        return geo_multi.exp_map_ambient(atlas, X0, V0,
                                         steps=int(g["steps"]) * int(g["substeps"]))
    raise ConfigError(f"unknown exp-map solver {solver!r}")


def cmd_expmap(cfg, model_path, input_path, out):
    atlas = _load_atlas(model_path)
    rows = _read_points_csv(input_path)
    D = atlas.D
    if rows.shape[1] != 2 * D:
        raise ConfigError(f"expected rows of [x(1..{D}), v(1..{D})]")
    traj = _run_solver(cfg, atlas, rows[:, :D], rows[:, D:])
    with open(out, "w") as fh:
        fh.write(f"# config {config_hash(cfg)} solver={cfg['geometry']['solver']}\n")
        fh.write(traj.to_csv())
    _write_artifacts(out, cfg, [model_path, input_path])
    print(f"integrated {len(rows)} trajectories to {out}")
    return 0


def cmd_logmap(cfg, model_path, pairs_path, out):
    atlas = _load_atlas(model_path)
    rows = _read_points_csv(pairs_path)
    D = atlas.D
    if rows.shape[1] != 2 * D:
        raise ConfigError(f"expected rows of [x0(1..{D}), x1(1..{D})]")
    g = cfg["geometry"]
    res = geo_multi.log_map_multi(atlas, rows[:, :D], rows[:, D:],
                                  K=int(g["spline_controls"]), iters=int(g["iters"]),
                                  T=int(g["spline_samples"]), lr=float(g["lr"]),
                                  resp_refresh=int(g["resp_refresh"]))
    lengths = np.atleast_1d(res.lengths)
    with open(out, "w") as fh:
        fh.write(f"# config {config_hash(cfg)}\n")
        fh.write("length,converged," + ",".join(f"v{k + 1}" for k in range(D)) + "\n")
        v0 = np.atleast_2d(res.v0)
        for p in range(len(lengths)):
            fh.write(f"{lengths[p]:.10g},{int(res.converged[p])},"
                     + ",".join(f"{u:.10g}" for u in v0[p]) + "\n")
    _write_artifacts(out, cfg, [model_path, pairs_path])
    print(f"solved {len(lengths)} log maps to {out}")
    return 0


def cmd_distmat(cfg, model_path, points_path, out):
    atlas = _load_atlas(model_path)
    points = _read_points_csv(points_path)
    g = cfg["geometry"]
    dm = geo_multi.distance_matrix(atlas, points, K=int(g["spline_controls"]),
                                   iters=int(g["iters"]), T=int(g["spline_samples"]),
                                   lr=float(g["lr"]), resp_refresh=int(g["resp_refresh"]),
                                   chunk=int(g["chunk"]))
    with open(out, "w") as fh:
        fh.write(dm.to_csv())
    i, j = np.tril_indices(len(points), k=-1)
    with open(out + ".diagnostics.csv", "w") as fh:
        fh.write("i,j,length,converged\n")
        for a, b in zip(i, j):
            fh.write(f"{a},{b},{dm.matrix[a, b]:.10g},{int(dm.converged[a, b])}\n")
    _write_artifacts(out, cfg, [model_path, points_path])
    print(f"wrote {len(points)}x{len(points)} distance matrix to {out}")
    return 0


def _read_distance_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    n = int(lines[0])
    return np.array([[float(v) for v in ln.split(",")] for ln in lines[1:n + 1]])


def cmd_persist(cfg, dist_path, out, svg=None):
    D = _read_distance_csv(dist_path)
    t = cfg["tda"]
    max_radius = float(t["max_radius"]) if t["max_radius"] else None
    diag = tda.rips_persistence(D, max_dim=int(t["max_dim"]), max_radius=max_radius)
    with open(out, "w") as fh:
        fh.write(f"# config {config_hash(cfg)}\n")
        fh.write(diag.to_csv())
    if svg:
        with open(svg, "w") as fh:
            fh.write(diag.to_svg())
    _write_artifacts(out, cfg, [dist_path])
    for dim in range(int(t["max_dim"]) + 1):
        top = tda.diagram_summary(diag, dim)[:3]
        desc = ", ".join(f"({f.birth:.3g}, "
                         + ("inf" if np.isinf(f.death) else f"{f.death:.3g}") + ")"
                         for f in top)
        print(f"H{dim}: {len(diag.in_dim(dim))} features; top: {desc}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="flowatlas",
                                     description="multi-chart flows on manifolds")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, *positionals):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        for pos in positionals:
            p.add_argument(pos)
        return p

    add("gen", "out")
    add("train", "data", "out")
    add("eval", "model", "data", "out")
    p = add("sample", "model", "out")
    p.add_argument("--n", type=int, default=1000)
    add("expmap", "model", "input", "out")
    add("logmap", "model", "pairs", "out")
    add("distmat", "model", "points", "out")
    p = add("persist", "distances", "out")
    p.add_argument("--svg", default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "gen":
            return cmd_gen(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.data, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.model, args.data, args.out)
        if args.command == "sample":
            return cmd_sample(cfg, args.model, args.out, args.n)
        if args.command == "expmap":
            return cmd_expmap(cfg, args.model, args.input, args.out)
        if args.command == "logmap":
            return cmd_logmap(cfg, args.model, args.pairs, args.out)
        if args.command == "distmat":
            return cmd_distmat(cfg, args.model, args.points, args.out)
        if args.command == "persist":
            return cmd_persist(cfg, args.distances, args.out, args.svg)
        raise ConfigError(f"unknown command {args.command!r}")
    except (NumericalError, OffManifoldError) as e:
        print(f"error: numerical: {e}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except FlowAtlasError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Operator entry point: train, evaluate, sample, probe, and inspect.

Every command prints a machine-readable JSON summary as its final stdout
line.  Exit codes: 0 success, 2 config error, 3 runtime divergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import calib as calib_mod
from . import checkpoint, data, evaluation, graph, rbm, samplers, vae

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config schema: {section: {key: (default, type)}}; None default = required

_SCHEMA = {
    "model": {
        "graph": ("chimera", str),
        "rows": (2, int),
        "cols": (2, int),
        "shore": (4, int),
        "n": (16, int),
        "patch_size": (6, int),
        "mapping": ("bipartite", str),
        "mask": ([], list),
        "tau": (1.0 / 7.0, float),
        "trunk_widths": ([64], list),
        "head_width": (64, int),
        "decoder_widths": ([64], list),
        "dropout": (0.2, float),
        "batchnorm": (True, bool),
    },
    "data": {
        "kind": ("bars-stripes", str),
        "side": (4, int),
        "count": (2048, int),
        "seed": (0, int),
        "images": ("", str),
        "labels": ("", str),
        "subset": (0, int),
    },
    "sampler": {
        "backend": ("pcd", str),
        "seed": (1, int),
        "k_sweeps": (5, int),
        "n_sweeps": (100, int),
        "population": (1024, int),
        "ladder_steps": (64, int),
        "sweeps_per_step": (5, int),
        "preset": ("noiseless", str),
        "beta0": (1.0, float),
    },
    "train": {
        "epochs": (20, int),
        "batch_size": (100, int),
        "lr_init": (3e-3, float),
        "lr_min": (1e-4, float),
        "lr_decay_epochs": (1800, int),
        "kl_ramp_epochs": (200, int),
        "kd_schedule": ([[1, 8, 0], [2, 4, 200], [2, 4, 400], [4, 2, 600], [4, 2, 800], [8, 1, 1000]], list),
        "neg_samples": (1000, int),
        "clip_b": (0.0, float),
        "clip_w": (0.0, float),
        "seed": (0, int),
        "eval_every": (10, int),
        "eval_k": (100, int),
        "eval_subset": (256, int),
    },
    "calib": {
        "enabled": (False, bool),
        "gamma": (1e-3, float),
        "every": (1, int),
    },
    "output": {
        "dir": ("", str),
        "checkpoint_every": (0, int),
    },
}


def load_config(path) -> dict:
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    cfg = {}
    for section, keys in _SCHEMA.items():
        got = raw.pop(section, {})
        if not isinstance(got, dict):
            raise ConfigError(f"{section}: expected a table")
        cfg[section] = {}
        for key, (default, typ) in keys.items():
            value = got.pop(key, default)
            if typ in (int, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
                value = typ(value)
            if not isinstance(value, typ):
                raise ConfigError(f"{section}.{key}: expected {typ.__name__}, got {value!r}")
            cfg[section][key] = value
        if got:
            raise ConfigError(f"{section}.{next(iter(got))}: unknown key")
    if raw:
        raise ConfigError(f"{next(iter(raw))}: unknown section")
    return cfg


def echo_config(cfg: dict) -> None:
    for section in sorted(cfg):
        for key in sorted(cfg[section]):
            print(f"{section}.{key} = {json.dumps(cfg[section][key])}")


def build_graph_from_config(mcfg: dict) -> graph.Connectivity:
    kind = mcfg["graph"]
    if kind == graph.CHIMERA:
        conn = graph.build_chimera(mcfg["rows"], mcfg["cols"], mcfg["shore"])
    elif kind == graph.PEGASUS:
        conn = graph.build_pegasus(mcfg["patch_size"], mcfg["shore"])
    elif kind == graph.BERNOULLI:
        conn = graph.build_bernoulli(mcfg["n"])
    elif kind == graph.COMPLETE:
        conn = graph.build_complete(mcfg["n"])
    else:
        raise ConfigError(f"model.graph: unknown kind {kind!r}")
    if mcfg["mask"]:
        conn = graph.mask_nodes(conn, [int(v) for v in mcfg["mask"]])
    return conn


def build_dataset_from_config(dcfg: dict) -> tuple[data.Dataset, dict]:
    if dcfg["kind"] == "bars-stripes":
        ds = data.bars_stripes_dataset(dcfg["side"], dcfg["count"], seed=dcfg["seed"])
        manifest = data.split_manifest(dcfg["count"], seed=dcfg["seed"] + 1)
    elif dcfg["kind"] == "idx":
        x, y = data.load_idx(dcfg["images"], dcfg["labels"] or None, expect_side=28)
        ds = data.split_dataset(x, y, seed=dcfg["seed"])
        manifest = data.split_manifest(len(x), seed=dcfg["seed"])
    else:
        raise ConfigError(f"data.kind: unknown kind {dcfg['kind']!r}")
    if dcfg["subset"]:
        ds = data.Dataset(
            ds.x_train[: dcfg["subset"]], ds.x_val, ds.x_test,
            None if ds.y_train is None else ds.y_train[: dcfg["subset"]],
            ds.y_val, ds.y_test,
        )
        manifest["train"] = manifest["train"][: dcfg["subset"]]
    return ds, manifest


def build_sampler_from_config(scfg: dict):
    backend = scfg["backend"]
    if backend == "exact":
        return samplers.ExactSampler(seed=scfg["seed"])
    if backend == "gibbs":
        return samplers.GibbsSampler(n_sweeps=scfg["n_sweeps"], seed=scfg["seed"])
    if backend == "pcd":
        return samplers.PcdSampler(k_sweeps=scfg["k_sweeps"], seed=scfg["seed"])
    if backend == "pa":
        cfg = samplers.PaConfig(
            population=scfg["population"],
            beta_ladder=np.linspace(0.0, 1.0, scfg["ladder_steps"] + 1),
            sweeps_per_step=scfg["sweeps_per_step"],
        )
        return samplers.PopulationAnnealer(cfg, seed=scfg["seed"])
    if backend == "emulator":
        return samplers.AnnealerEmulator(
            samplers.emulator_preset(scfg["preset"], seed=scfg["seed"], beta0=scfg["beta0"])
        )
    raise ConfigError(f"sampler.backend: unknown backend {backend!r}")


def train_config_from(cfg: dict) -> vae.TrainConfig:
    t = cfg["train"]
    return vae.TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        lr_init=t["lr_init"],
        lr_min=t["lr_min"],
        lr_decay_epochs=t["lr_decay_epochs"],
        tau=cfg["model"]["tau"],
        kl_ramp_epochs=t["kl_ramp_epochs"],
        kd_schedule=tuple(tuple(x) for x in t["kd_schedule"]),
        neg_samples=t["neg_samples"],
        clip_b=t["clip_b"] or None,
        clip_W=t["clip_w"] or None,
        seed=t["seed"],
        eval_every=t["eval_every"],
        eval_k=t["eval_k"],
        eval_subset=t["eval_subset"],
        calib_enabled=cfg["calib"]["enabled"],
        calib_gamma=cfg["calib"]["gamma"],
        calib_every=cfg["calib"]["every"],
        checkpoint_every=cfg["output"]["checkpoint_every"],
    )


def _out_dir(cfg_dir: str) -> str:
    out = cfg_dir or os.environ.get("BOLTZVAE_OUT", "runs/default")
    os.makedirs(out, exist_ok=True)
    return out


def write_pgm_grid(path, images: np.ndarray, side: int) -> None:
    """Tile flattened [0,1] images into one binary-PGM canvas."""
    n = len(images)
    if n == 0:
        canvas = np.zeros((side, side))
    else:
        cols = int(math.ceil(math.sqrt(n)))
        rows = int(math.ceil(n / cols))
        canvas = np.zeros((rows * side, cols * side))
        for i, img in enumerate(images):
            r, c = divmod(i, cols)
            canvas[r * side : (r + 1) * side, c * side : (c + 1) * side] = img.reshape(side, side)
    pixels = (canvas * 255).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode())
        f.write(pixels.tobytes())


def _summary(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    echo_config(cfg)
    out = _out_dir(cfg["output"]["dir"])
    conn = build_graph_from_config(cfg["model"])
    mapping = graph.hierarchy_mapping(conn, cfg["model"]["mapping"])
    ds, manifest = build_dataset_from_config(cfg["data"])
    with open(os.path.join(out, "split_manifest.json"), "w") as mf:
        json.dump(manifest, mf, sort_keys=True)
    sampler = build_sampler_from_config(cfg["sampler"])
    arch = vae.ArchConfig(
        input_dim=ds.num_pixels,
        trunk_widths=tuple(cfg["model"]["trunk_widths"]),
        head_width=cfg["model"]["head_width"],
        decoder_widths=tuple(cfg["model"]["decoder_widths"]),
        use_batchnorm=cfg["model"]["batchnorm"],
        dropout_rate=cfg["model"]["dropout"],
    )
    tcfg = train_config_from(cfg)
    ckpt_path = os.path.join(out, "model.ckpt")
    metrics_path = os.path.join(out, "metrics.jsonl")

    def checkpoint_cb(state):
        checkpoint.save_model(ckpt_path, state.model, extra={"epoch": state.epoch})

    with open(metrics_path, "w") as mf:
        def writer(record):
            mf.write(json.dumps(record, sort_keys=True) + "\n")

        try:
            state = vae.train(
                tcfg, ds, sampler, arch=arch, conn=conn, mapping=mapping,
                metrics_writer=writer, checkpoint_cb=checkpoint_cb,
            )
        except vae.TrainingDiverged as e:
            _summary({"command": "train", "error": str(e), "checkpoint": ckpt_path})
            return EXIT_DIVERGED
        except KeyboardInterrupt:
            # the trainer has already flushed a checkpoint
            _summary({"command": "train", "error": "interrupted", "checkpoint": ckpt_path})
            return 130
    checkpoint_cb(state)
    final = state.metrics[-1] if state.metrics else {}
    _summary({
        "command": "train",
        "checkpoint": ckpt_path,
        "metrics": metrics_path,
        "final": final,
    })
    return 0


def cmd_eval(args) -> int:
    model, _ = checkpoint.load_model(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    if args.images:
        x, _ = data.load_idx(args.images, expect_side=28)
    else:
        x, _ = data.synth_bars_stripes(args.side, args.count, np.random.default_rng(args.seed))
    x = x[: args.subset] if args.subset else x
    xb = data.dynamic_binarize(x, rng)
    log_z, log_z_err = evaluation.estimate_log_z(model.prior, rng)
    ll, err = evaluation.log_likelihood(model, xb, args.k, log_z, log_z_err, rng)
    act = evaluation.active_units(model, xb, rng)
    _summary({
        "command": "eval",
        "checkpoint": args.checkpoint,
        "k": args.k,
        "examples": len(xb),
        "log_z": log_z,
        "log_z_err": log_z_err,
        "ll_nats": ll,
        "ll_stderr": err,
        "active_units": act,
    })
    return 0


def _default_sampler_for(model, seed):
    if int(model.conn.active_mask.sum()) <= rbm.ENUM_CAP:
        return samplers.ExactSampler(seed=seed)
    return samplers.GibbsSampler(n_sweeps=200, seed=seed)


def cmd_sample(args) -> int:
    model, _ = checkpoint.load_model(args.checkpoint)
    out = _out_dir(args.out)
    sampler = _default_sampler_for(model, args.seed)
    probs = evaluation.generate(model, sampler, args.n)
    side = int(round(math.sqrt(model.decoder.out_dim)))
    grid_path = os.path.join(out, "samples.pgm")
    raw_path = os.path.join(out, "samples.npy")
    write_pgm_grid(grid_path, probs, side)
    np.save(raw_path, probs)
    _summary({"command": "sample", "n": args.n, "grid": grid_path, "raw": raw_path})
    return 0


def cmd_chain(args) -> int:
    model, _ = checkpoint.load_model(args.checkpoint)
    out = _out_dir(args.out)
    rng = np.random.default_rng(args.seed)
    latents, decoded = evaluation.gibbs_walk(model, args.steps, rng)
    side = int(round(math.sqrt(model.decoder.out_dim)))
    grid_path = os.path.join(out, "chain.pgm")
    write_pgm_grid(grid_path, decoded, side)
    np.save(os.path.join(out, "chain_latents.npy"), latents)
    _summary({
        "command": "chain",
        "steps": args.steps,
        "grid": grid_path,
        "lag1_autocorr": evaluation.latent_lag_autocorr(latents, 1),
        "frame_cosine": evaluation.frame_cosine_similarity(decoded),
    })
    return 0


def cmd_calib(args) -> int:
    # 16-unit demo instance drawn in the device's (h, J) domain so no
    # range clamping distorts the recovery target
    rng = np.random.default_rng(args.seed)
    conn = graph.build_chimera(1, 2, 4)
    h = rng.uniform(-1, 1, conn.num_nodes)
    J = rng.uniform(-1, 1, conn.num_edges)
    ising = rbm.IsingView(conn, h, J, args.beta_true)
    params = rbm.from_ising(ising)
    emulator = samplers.AnnealerEmulator(
        samplers.EmulatorConfig(beta0=args.beta_true, seed=args.seed + 1)
    )
    state = calib_mod.CalibState(beta_eff=1.0, gamma=args.gamma)
    aux = samplers.PopulationAnnealer(
        samplers.PaConfig(population=256, beta_ladder=np.linspace(0, 1, 17), sweeps_per_step=3),
        seed=args.seed + 2,
    )
    for _ in range(args.updates):
        hw = emulator.draw(params, 1000)
        aux_params = rbm.from_ising(rbm.IsingView(conn, h, J, state.beta_eff))
        calib_mod.update_beta(state, ising, hw, aux.draw(aux_params, 1000))
    _summary({
        "command": "calib",
        "beta_true": args.beta_true,
        "beta_est": state.beta_eff,
        "abs_error": abs(state.beta_eff - args.beta_true),
        "updates": args.updates,
    })
    return 0


def cmd_ablate(args) -> int:
    model, _ = checkpoint.load_model(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    x, y = data.synth_bars_stripes(args.side, args.count, rng)
    feats = evaluation.quadratic_features(x)
    clf = evaluation.SoftmaxClassifier(feats.shape[1], int(y.max()) + 1, seed=args.seed)
    clf.fit(feats, y)
    sampler = _default_sampler_for(model, args.seed + 1)
    intact = evaluation.quadratic_features(evaluation.generate(model, sampler, args.n))
    ablated_model = evaluation.ablate_couplings(model)
    ablated = evaluation.quadratic_features(evaluation.generate(ablated_model, sampler, args.n))
    stat, p = evaluation.class_histogram_shift(clf, intact, ablated)
    _summary({
        "command": "ablate",
        "n": args.n,
        "chi2": stat,
        "p_value": p,
        "coupling_l1_before": float(np.abs(model.prior.W).sum()),
    })
    return 0


def cmd_graph_info(args) -> int:
    mcfg = dict(_SCHEMA_DEFAULTS["model"])
    mcfg.update({
        "graph": args.kind, "rows": args.rows, "cols": args.cols, "shore": args.shore,
        "n": args.n, "patch_size": args.patch_size, "mask": [],
    })
    conn = build_graph_from_config(mcfg)
    _summary({"command": "graph info", **graph.graph_stats(conn)})
    return 0


_SCHEMA_DEFAULTS = {
    section: {key: default for key, (default, _) in keys.items()}
    for section, keys in _SCHEMA.items()
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boltzvae")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="likelihood bound and active units for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--k", type=int, default=1000)
    e.add_argument("--images", default="")
    e.add_argument("--side", type=int, default=4)
    e.add_argument("--count", type=int, default=1024)
    e.add_argument("--subset", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="generate and decode prior samples")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--out", default="")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    c = sub.add_parser("chain", help="block-Gibbs walk through the trained prior")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--steps", type=int, default=63)
    c.add_argument("--out", default="")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_chain)

    k = sub.add_parser("calib", help="effective-temperature recovery demo")
    k.add_argument("--beta-true", type=float, default=0.37)
    k.add_argument("--updates", type=int, default=500)
    k.add_argument("--gamma", type=float, default=1e-3)
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(func=cmd_calib)

    a = sub.add_parser("ablate", help="zero-coupling generation comparison")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--n", type=int, default=512)
    a.add_argument("--side", type=int, default=4)
    a.add_argument("--count", type=int, default=2048)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("graph", help="graph utilities")
    gsub = g.add_subparsers(dest="graph_command", required=True)
    gi = gsub.add_parser("info", help="node/edge/color statistics")
    gi.add_argument("--kind", required=True)
    gi.add_argument("--rows", type=int, default=2)
    gi.add_argument("--cols", type=int, default=2)
    gi.add_argument("--shore", type=int, default=4)
    gi.add_argument("--n", type=int, default=16)
    gi.add_argument("--patch-size", type=int, default=6)
    gi.set_defaults(func=cmd_graph_info)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except vae.TrainingDiverged as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (data.IdxFormatError, checkpoint.CheckpointError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

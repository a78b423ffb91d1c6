"""Command-line entry point: ``molflae <verb> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every run writes
``run.json`` (resolved options, seed, checkpoint hash, tool version) into its
output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import manipulate as ops
from . import metrics
from .checkpoint import file_hash
from .geom import apply, rotation_angle_between
from .moldata import Molecule, load_vocabulary, load_xyz, write_xyz
from .training import TrainConfig, apply_overrides, format_config, load_checkpoint, load_config, train

DATA_DIR_ENV = "MOLFLAE_DATA_DIR"
VERBS = ("train", "sample", "encode", "decode", "analog", "swap", "interpolate", "align", "eval")
METRIC_NAMES = ("stability", "validity", "uniqueness", "novelty", "descriptors")

log = logging.getLogger("molflae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _globals() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="key=value config file (train) ")
    g.add_argument("--checkpoint", help="trained checkpoint archive")
    g.add_argument("--seed", type=int, default=None, help="random seed (default 0; train: config seed)")
    g.add_argument("--steps", type=int, default=None, help="sampling steps (train: step budget)")
    g.add_argument("--out", help="output directory (default ./molflae-<verb>)")
    g.add_argument("--threads", type=int, default=None, help="torch threads (default: all cores)")
    g.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")
    return p


def build_parser() -> argparse.ArgumentParser:
    parent = _globals()
    root = _Parser(prog="molflae", description="Latent autoencoder for 3D molecules.")
    root.add_argument("--version", action="version", version=f"molflae {__version__}")
    sub = root.add_subparsers(dest="verb", metavar="verb", parser_class=_Parser)

    p = sub.add_parser("train", parents=[parent], help="train a model on an XYZ corpus")
    p.add_argument("--data", help=f"training XYZ (default ${DATA_DIR_ENV}/train.xyz)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("sample", parents=[parent], help="decode random draws from the latent prior")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--sidecar", action="store_true", help="write a JSON sidecar per molecule")

    p = sub.add_parser("encode", parents=[parent], help="write posterior latents as JSON")
    p.add_argument("--input", required=True)

    p = sub.add_parser("decode", parents=[parent], help="decode latents from an encode JSON")
    p.add_argument("--latents", required=True)
    p.add_argument("--n-atoms", type=int, default=None)

    p = sub.add_parser("analog", parents=[parent], help="re-decode molecules with shifted atom counts")
    p.add_argument("--input", required=True)
    p.add_argument("--delta", type=int, default=0)

    p = sub.add_parser("swap", parents=[parent], help="exchange spatial and feature latents of two molecules")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)

    p = sub.add_parser("interpolate", parents=[parent], help="decode linear blends between two molecules")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="decode one blend weight on B instead")
    p.add_argument("--repeats", type=int, default=1, help="decodes per blend with --lambda")

    p = sub.add_parser("align", parents=[parent], help="superpose two molecules through their spatial latents")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)

    p = sub.add_parser("eval", parents=[parent], help="compute metrics on an XYZ file")
    p.add_argument("--input", required=True)
    p.add_argument("--metrics", default="stability", help=f"comma list from {','.join(METRIC_NAMES)}")
    p.add_argument("--vocab", default=None, help="atom vocabulary (default: checkpoint's, else qm9)")
    p.add_argument("--train-set", help="XYZ of training molecules for novelty")
    p.add_argument("--similarity-csv", help="external similarity table (id_a,id_b,value) to summarise")
    return root


def _resolve(path: str) -> Path:
    p = Path(path)
    if not p.exists() and not p.is_absolute() and os.environ.get(DATA_DIR_ENV):
        alt = Path(os.environ[DATA_DIR_ENV]) / p
        if alt.exists():
            return alt
    if not p.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return p


def _out_dir(args) -> Path:
    out = Path(args.out or f"molflae-{args.verb}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _record(out: Path, args, config_text: str | None, ck_hash: str | None, extra: dict | None = None):
    opts = {k: v for k, v in sorted(vars(args).items())}
    rec = {
        "verb": args.verb,
        "options": opts,
        "seed": args.seed,
        "checkpoint_hash": ck_hash,
        "version": __version__,
        "config": config_text,
    }
    if extra:
        rec.update(extra)
    (out / "run.json").write_text(json.dumps(rec, indent=2, sort_keys=True, default=str) + "\n")


def _need_model(args) -> ops.LoadedModel:
    if not args.checkpoint:
        raise UsageError(f"molflae {args.verb}: --checkpoint is required")
    return ops.load_model(_resolve(args.checkpoint))


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _steps(args) -> int:
    return args.steps if args.steps is not None else 100


def _one(path, vocab) -> Molecule:
    mols = load_xyz(_resolve(path), vocab)
    if len(mols) != 1:
        log.warning("%s holds %d molecules; using the first", path, len(mols))
    return mols[0]


def cmd_train(args) -> int:
    cfg = load_config(_resolve(args.config)) if args.config else TrainConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    try:
        cfg = apply_overrides(cfg, overrides)
    except ValueError as exc:
        raise UsageError(f"molflae train: {exc}") from None
    if args.seed is None:
        args.seed = cfg.seed
    cfg = cfg.replace(seed=args.seed)
    if args.steps is not None:
        cfg = cfg.replace(max_steps=args.steps)
    data = args.data
    if data is None:
        if not os.environ.get(DATA_DIR_ENV):
            raise UsageError(f"molflae train: pass --data or set {DATA_DIR_ENV}")
        data = str(Path(os.environ[DATA_DIR_ENV]) / "train.xyz")
    vocab = load_vocabulary(cfg.vocab)
    dataset = load_xyz(_resolve(data), vocab)
    out = _out_dir(args)
    resume = load_checkpoint(_resolve(args.resume)) if args.resume else None
    ck_path = out / "model.ckpt"
    final = train(dataset, cfg, vocab, resume=resume, checkpoint_path=ck_path)
    (out / "config.txt").write_text(format_config(cfg))
    _record(out, args, format_config(cfg), file_hash(ck_path), {"final_step": final.step})
    print(f"trained {final.step} steps; checkpoint {ck_path}")
    return 0


def cmd_sample(args) -> int:
    lm = _need_model(args)
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    gen = _generator(args.seed)
    mols = ops.generate(lm, args.count, _steps(args), gen)
    out = _out_dir(args)
    write_xyz(out / "samples.xyz", mols, lm.vocab)
    if args.sidecar:
        for i, m in enumerate(mols):
            ops.write_sidecar(out / f"sample_{i}.json", "sample", args.seed, index=i, n_atoms=m.num_atoms)
    _record(out, args, format_config(lm.checkpoint.config), lm.checkpoint_hash)
    print(f"wrote {len(mols)} molecules to {out / 'samples.xyz'}")
    return 0


def cmd_encode(args) -> int:
    lm = _need_model(args)
    mols = load_xyz(_resolve(args.input), lm.vocab)
    recs = [ops.encode_record(lm, m) for m in mols]
    out = _out_dir(args)
    (out / "latents.json").write_text(json.dumps(recs, indent=1) + "\n")
    _record(out, args, format_config(lm.checkpoint.config), lm.checkpoint_hash)
    print(f"encoded {len(recs)} molecules to {out / 'latents.json'}")
    return 0


def cmd_decode(args) -> int:
    lm = _need_model(args)
    raw = json.loads(_resolve(args.latents).read_text())
    recs = raw if isinstance(raw, list) else [raw]
    for r in recs:
        h = r.get("checkpoint_hash")
        if h and h != lm.checkpoint_hash:
            log.warning("latent record %s was produced by a different checkpoint", r.get("name", ""))
    mols = ops.decode_records(lm, recs, _steps(args), _generator(args.seed), n_atoms=args.n_atoms)
    out = _out_dir(args)
    write_xyz(out / "decoded.xyz", mols, lm.vocab)
    _record(out, args, format_config(lm.checkpoint.config), lm.checkpoint_hash)
    print(f"decoded {len(mols)} molecules to {out / 'decoded.xyz'}")
    return 0


def cmd_analog(args) -> int:
    lm = _need_model(args)
    mols = load_xyz(_resolve(args.input), lm.vocab)
    gen = _generator(args.seed)
    outs = [ops.analog(lm, m, args.delta, _steps(args), gen) for m in mols]
    out = _out_dir(args)
    write_xyz(out / "analogs.xyz", outs, lm.vocab)
    _record(out, args, format_config(lm.checkpoint.config), lm.checkpoint_hash)
    print(f"wrote {len(outs)} analogs to {out / 'analogs.xyz'}")
    return 0


def cmd_swap(args) -> int:
    lm = _need_model(args)
    a, b = _one(args.a, lm.vocab), _one(args.b, lm.vocab)
    keep_xa, keep_xb = ops.swap(lm, a, b, _steps(args), _generator(args.seed))
    out = _out_dir(args)
    write_xyz(out / "spatial_from_a.xyz", [keep_xa], lm.vocab)
    write_xyz(out / "spatial_from_b.xyz", [keep_xb], lm.vocab)
    rows = [
        {"output": "spatial_from_a", "shape_sim_a": _safe_shape(keep_xa, a, lm.vocab), "shape_sim_b": _safe_shape(keep_xa, b, lm.vocab)},
        {"output": "spatial_from_b", "shape_sim_a": _safe_shape(keep_xb, a, lm.vocab), "shape_sim_b": _safe_shape(keep_xb, b, lm.vocab)},
    ]
    metrics.write_report_csv(out / "swap.csv", rows)
    _record(out, args, format_config(lm.checkpoint.config), lm.checkpoint_hash)
    print(metrics.format_table(rows))
    return 0


def _safe_shape(m, ref, vocab) -> float:
    try:
        return metrics.shape_similarity(m, ref, vocab)
    except metrics.DegenerateInputError:
        return float("nan")


def _trend_rows(frames, a, b, vocab) -> list[dict]:
    props = {
        "sp3_fraction": lambda m: metrics.sp3_fraction(m, vocab),
        "radius_of_gyration": metrics.radius_of_gyration,
        "heavy_atom_count": lambda m: float(metrics.heavy_atom_count(m, vocab)),
    }
    rows = []
    for name, fn in props.items():
        vals = [fn(f) for f in frames]
        diff = fn(b) - fn(a)
        sign = 1 if diff >= 0 else -1
        rows.append(_trend_row(name, vals, sign))
    fp = lambda x, y: metrics.fingerprint_similarity(x, y, vocab)  # noqa: E731
    try:
        pref = metrics.preference_sequence(frames, a, b, fp)
        rows.append(_trend_row("similarity_preference", pref, 1))
    except ZeroDivisionError:
        rows.append({"property": "similarity_preference", "sign": 1, "pearson_r": float("nan"), "neg_log10_p": float("nan")})
    return rows


def _trend_row(name, vals, sign) -> dict:
    row = {"property": name, "sign": sign}
    try:
        rep = metrics.pearson_trend(vals, sign)
        row.update(pearson_r=rep.pearson_r, neg_log10_p=rep.neg_log_p)
    except metrics.DegenerateInputError:
        row.update(pearson_r=float("nan"), neg_log10_p=float("nan"))
    row["values"] = " ".join(f"{v:.4g}" for v in vals)
    return row


def cmd_interpolate(args) -> int:
    lm = _need_model(args)
    a, b = _one(args.a, lm.vocab), _one(args.b, lm.vocab)
    gen = _generator(args.seed)
    out = _out_dir(args)
    ck_cfg = format_config(lm.checkpoint.config)
    if args.lam is not None:
        if not 0.0 <= args.lam <= 1.0:
            raise UsageError("--lambda must lie in [0, 1]")
        za, ca = ops.encode_mean(lm, a)
        zb, cb = ops.encode_mean(lm, b)
        lam = args.lam
        z = ops.LatentCode((1 - lam) * za.z_x + lam * zb.z_x, (1 - lam) * za.z_h + lam * zb.z_h)
        n = int(np.floor((1 - lam) * a.num_atoms + lam * b.num_atoms + 0.5))
        mols = [ops.decode_latent(lm, z, n, _steps(args), gen, shift=(1 - lam) * ca + lam * cb, name=f"blend_{i}") for i in range(args.repeats)]
        write_xyz(out / "blend.xyz", mols, lm.vocab)
        ops.write_sidecar(out / "blend.json", "interpolate", args.seed, z, lam, repeats=args.repeats)
        _record(out, args, ck_cfg, lm.checkpoint_hash)
        print(f"wrote {len(mols)} decodes at lambda={lam} to {out / 'blend.xyz'}")
        return 0
    if args.points < 2:
        raise UsageError("--points must be at least 2")
    frames = ops.interpolate(lm, a, b, args.points, _steps(args), gen)
    for j, f in enumerate(frames):
        write_xyz(out / f"frame_{j:03d}.xyz", [f], lm.vocab)
    rows = _trend_rows(frames, a, b, lm.vocab)
    metrics.write_report_csv(out / "trend.csv", rows)
    _record(out, args, ck_cfg, lm.checkpoint_hash)
    print(metrics.format_table([{k: v for k, v in r.items() if k != "values"} for r in rows]))
    return 0


def cmd_align(args) -> int:
    lm = _need_model(args)
    a, b = _one(args.a, lm.vocab), _one(args.b, lm.vocab)
    tr = ops.latent_align(lm, a, b)
    moved = Molecule(apply(tr, a.coords), a.types, a.name + "_aligned")
    out = _out_dir(args)
    write_xyz(out / "aligned.xyz", [moved], lm.vocab)
    rec = {
        "rotation": tr.rotation.tolist(),
        "translation": tr.translation.tolist(),
        "rotation_angle_deg": rotation_angle_between(tr.rotation, np.eye(3)),
    }
    (out / "transform.json").write_text(json.dumps(rec, indent=2) + "\n")
    _record(out, args, format_config(lm.checkpoint.config), lm.checkpoint_hash)
    print(json.dumps(rec, indent=2))
    return 0


def cmd_eval(args) -> int:
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in wanted if m not in METRIC_NAMES]
    if bad:
        raise UsageError(f"unknown metrics {bad}; choose from {METRIC_NAMES}")
    ck_hash = None
    if args.vocab:
        vocab = load_vocabulary(args.vocab)
    elif args.checkpoint:
        ck = load_checkpoint(_resolve(args.checkpoint))
        vocab, ck_hash = ck.vocab, file_hash(_resolve(args.checkpoint))
    else:
        vocab = load_vocabulary("qm9")
    mols = load_xyz(_resolve(args.input), vocab)
    row: dict = {"n_molecules": len(mols)}
    if "stability" in wanted:
        st = metrics.stability(mols, vocab)
        row.update(atom_stability_pct=100 * st.atom_stability, mol_stability_pct=100 * st.mol_stability)
    if "validity" in wanted or "uniqueness" in wanted or "novelty" in wanted:
        train_hashes = None
        if args.train_set:
            train_hashes = {metrics.canonical_hash(m, vocab) for m in load_xyz(_resolve(args.train_set), vocab)}
        rep = metrics.generation_report(mols, vocab, train_hashes)
        row.update(valid_pct=100 * rep.valid, valid_unique_pct=100 * rep.valid_unique)
        if "novelty" in wanted:
            if rep.novelty is None:
                raise UsageError("novelty needs --train-set")
            row["novelty_pct"] = 100 * rep.novelty
    if "descriptors" in wanted:
        row.update(
            mean_sp3_fraction=float(np.mean([metrics.sp3_fraction(m, vocab) for m in mols])),
            mean_radius_of_gyration=float(np.mean([metrics.radius_of_gyration(m) for m in mols])),
            mean_heavy_atoms=float(np.mean([metrics.heavy_atom_count(m, vocab) for m in mols])),
        )
    if args.similarity_csv:
        table = metrics.load_similarity_csv(_resolve(args.similarity_csv))
        row["external_similarity_mean"] = float(np.mean(list(table.values()))) if table else float("nan")
    out = _out_dir(args)
    metrics.write_report_csv(out / "metrics.csv", [row])
    _record(out, args, None, ck_hash)
    print(metrics.format_table([row]))
    return 0


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "analog": cmd_analog,
    "swap": cmd_swap,
    "interpolate": cmd_interpolate,
    "align": cmd_align,
    "eval": cmd_eval,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise UsageError(parser.format_usage() + "molflae: error: a verb is required")
        if args.seed is None and args.verb != "train":
            args.seed = 0
        if args.steps is not None and args.steps < 1:
            raise UsageError("--steps must be positive")
        if args.deterministic:
            torch.set_num_threads(1)
            torch.use_deterministic_algorithms(True)
        elif args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be positive")
            torch.set_num_threads(args.threads)
        return COMMANDS[args.verb](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"molflae: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

"""Command line pipeline: gen, encode, train, register, eval, mmd.

Machine-readable output goes to files and stdout, diagnostics to stderr,
and every subcommand's randomness derives from its seed, so identical
invocations reproduce identical non-timing outputs. Report subcommands
render a PNG figure next to their delimited text output. GERA_THREADS
caps BLAS parallelism when set to a positive integer (0 or unset: auto).
"""

from __future__ import annotations

import os

_threads = os.environ.get("GERA_THREADS", "")
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .descriptors import encode_cloud
from .io import (
    RegistrationConfig,
    file_sha256,
    load_cloud,
    load_descriptors,
    load_manifest,
    save_cloud,
    save_descriptors,
    save_displacements,
)
from .mmd import MmdConfig, stability_study
from .model import (
    DescriptorStore,
    TrainingDivergence,
    apply_displacement,
    build_model,
    chamfer_distance,
    evaluate,
    gera_forward,
    load_model,
    loss_xyz,
    save_model,
    train,
)
from .nn import mlp_init
from .synthesis import BASE_KINDS, build_dataset, make_base_cloud

BASE_CLOUD_POINTS = 10_000
MMD_INIT_SEED = 0  # encoder init for the stability study is fixed


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _fmt(value: float) -> str:
    return repr(float(value))


def _parse_split(text: str) -> tuple[int, int, int]:
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"split must be train:val:test, got {text!r}")
    ratio = tuple(int(p) for p in parts)
    if any(r < 0 for r in ratio) or sum(ratio) == 0:
        raise ValueError(f"bad split ratio {text!r}")
    return ratio


def _make_bases(bases_arg: str, count: int, seed) -> list[np.ndarray]:
    path = Path(bases_arg)
    if path.is_dir():
        files = sorted(
            p for p in path.iterdir() if p.suffix.lower() in (".xyz", ".ply")
        )
        if len(files) < count:
            raise ValueError(f"{path} holds {len(files)} clouds, need {count}")
        return [load_cloud(p) for p in files[:count]]
    kinds = [k.strip() for k in bases_arg.split(",") if k.strip()]
    for kind in kinds:
        if kind not in BASE_KINDS:
            raise ValueError(f"unknown base kind {kind!r}, expected one of {BASE_KINDS}")
    rng = np.random.default_rng(seed)
    shape_seeds = rng.integers(0, 2**63 - 1, size=count)
    return [
        make_base_cloud(kinds[i % len(kinds)], BASE_CLOUD_POINTS, int(shape_seeds[i]))
        for i in range(count)
    ]


def cmd_gen(args) -> int:
    ratio = _parse_split(args.split)
    if args.noise_mm_min < 0 or args.noise_mm_max < args.noise_mm_min:
        return _fail(f"bad noise range [{args.noise_mm_min}, {args.noise_mm_max}]")
    root = np.random.SeedSequence(args.seed)
    s_bases, s_data = root.spawn(2)
    bases = _make_bases(args.bases, args.count, s_bases)
    manifest = build_dataset(
        bases,
        args.out,
        split_ratio=ratio,
        deform_mag=args.deform_mm,
        noise_range=(args.noise_mm_min, args.noise_mm_max),
        points=args.points,
        seed=int(s_data.generate_state(1)[0]),
    )
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.records)} pairs under {args.out} "
          f"(train/val/test = {counts['train']}/{counts['val']}/{counts['test']})",
          file=sys.stderr)
    return 0


def _cache_path(out_dir: Path, cloud_rel: str, n_desc: int) -> Path:
    return out_dir / (Path(cloud_rel).name + f".n{n_desc}.gdesc")


def cmd_encode(args) -> int:
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out) if args.out else manifest.root / "desc"
    out_dir.mkdir(parents=True, exist_ok=True)
    index_path = out_dir / "cache_index.json"
    index: dict = {}
    if index_path.exists():
        try:
            index = json.loads(index_path.read_text())
        except json.JSONDecodeError:
            print(f"warning: unreadable cache index {index_path}, rebuilding", file=sys.stderr)

    encoded = 0
    skipped = 0
    seen: dict[str, None] = {}
    for rec in manifest.records:
        for rel in (rec.source, rec.target):
            seen.setdefault(rel)
    for rel in seen:
        cloud_path = manifest.resolve(rel)
        digest = file_sha256(cloud_path)
        cache = _cache_path(out_dir, rel, args.n_desc)
        entry = index.get(rel)
        if (
            entry
            and entry.get("sha256") == digest
            and entry.get("n_desc") == args.n_desc
            and cache.exists()
        ):
            try:
                load_descriptors(cache)
                skipped += 1
                continue
            except (OSError, ValueError):
                print(f"warning: corrupt cache {cache}, re-encoding", file=sys.stderr)
        desc = encode_cloud(load_cloud(cloud_path), args.n_desc)
        save_descriptors(desc, cache)
        index[rel] = {"sha256": digest, "n_desc": args.n_desc, "cache": cache.name}
        encoded += 1
    index_path.write_text(json.dumps(index, sort_keys=True, indent=0) + "\n")
    print(f"encoded\t{encoded}")
    print(f"skipped\t{skipped}")
    return 0


def _history_path(model_path: str | Path) -> Path:
    return Path(str(model_path) + ".history.tsv")


def _write_history(history, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# epoch\ttrain_loss\tval_rmse\tepoch_s\n")
        for h in history:
            fh.write(f"{h.epoch}\t{_fmt(h.train_loss)}\t{_fmt(h.val_rmse)}\t{h.seconds:.3f}\n")


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    config = RegistrationConfig(alpha_loss=args.alpha, seed=args.seed)
    model = build_model(config)
    store = DescriptorStore(manifest, config.n_desc)
    try:
        result = train(manifest, model, epochs=args.epochs, lr=args.lr, seed=args.seed, store=store)
    except TrainingDivergence as exc:
        save_model(model, args.out_model)
        print(f"error: training diverged ({exc}); last finite state saved", file=sys.stderr)
        return 1
    save_model(result.model, args.out_model)
    _write_history(result.history, _history_path(args.out_model))

    from .figures import save_history_figure

    save_history_figure(result.history, Path(str(args.out_model) + ".history.png"))
    print(
        f"trained {args.epochs} epochs, best val RMSE {result.best_val_rmse:.4f} mm, "
        f"encodings run {store.encodings_run}",
        file=sys.stderr,
    )
    return 0


def cmd_register(args) -> int:
    model = load_model(args.model)
    src = load_cloud(args.src)
    tgt = load_cloud(args.tgt)
    n_desc = model.config.n_desc
    if min(src.shape[0], tgt.shape[0]) <= n_desc:
        return _fail(f"clouds too small for the model's n_desc = {n_desc}")
    desc_src = encode_cloud(src, n_desc)
    desc_tgt = encode_cloud(tgt, n_desc)

    t0 = time.perf_counter()
    pred = gera_forward(src, tgt, desc_src, desc_tgt, model)
    elapsed_ms = (time.perf_counter() - t0) * 1e3
    deformed = apply_displacement(src, pred, model.config)

    out = Path(args.out)
    save_cloud(deformed, out)
    disp_path = out.with_suffix(out.suffix + ".disp.xyz")
    save_displacements(pred, disp_path)
    if deformed.shape == tgt.shape:
        print(f"rmse_mm={loss_xyz(deformed, tgt)!r}", file=sys.stderr)
    print(f"it_ms\t{elapsed_ms:.3f}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    model = load_model(args.model)
    store = DescriptorStore(manifest, model.config.n_desc)

    tt_s = 0.0
    hist_path = _history_path(args.model)
    if hist_path.exists():
        rows = [
            line.split("\t")
            for line in hist_path.read_text().splitlines()
            if line and not line.startswith("#")
        ]
        if rows:
            tt_s = float(np.mean([float(r[3]) for r in rows]))

    report = evaluate(manifest, model, store=store, train_epoch_seconds=tt_s)

    per_pair = []
    for rec in manifest.split("test"):
        src = store.cloud(rec.source)
        tgt = store.cloud(rec.target)
        pred = gera_forward(src, tgt, store.descriptors(rec.source), store.descriptors(rec.target), model)
        deformed = apply_displacement(src, pred, model.config)
        per_pair.append((loss_xyz(deformed, tgt), chamfer_distance(deformed, tgt)))

    report_path = Path(args.report)
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(f"rmse_mm\t{_fmt(report.rmse_mm)}\n")
        fh.write(f"cd_mm\t{_fmt(report.cd_mm)}\n")
        fh.write(f"it_ms\t{report.it_ms:.3f}\n")
        fh.write(f"tt_s\t{report.tt_s:.3f}\n")

    from .figures import save_eval_figure

    save_eval_figure(report, per_pair, report_path.with_suffix(report_path.suffix + ".png"))
    print(f"rmse_mm={report.rmse_mm:.4f} cd_mm={report.cd_mm:.4f}", file=sys.stderr)
    return 0


def cmd_mmd(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.sigma != "median":
        try:
            sigma = float(args.sigma)
        except ValueError:
            return _fail(f"--sigma must be 'median' or a number, got {args.sigma!r}")
        if sigma <= 0:
            return _fail("--sigma must be positive")
        config = MmdConfig(sigma=sigma)
    else:
        config = MmdConfig(sigma="median")

    defaults = RegistrationConfig()
    rng = np.random.default_rng(MMD_INIT_SEED)
    encoder_coord = mlp_init((3, *defaults.encoder_widths), rng, final_relu=True)
    encoder_geo = mlp_init((defaults.descriptor_dim, *defaults.encoder_widths), rng, final_relu=True)

    coord, geo = stability_study(
        manifest,
        encoder_coord,
        encoder_geo,
        batch_size=args.batch,
        config=config,
        n_desc=defaults.n_desc,
    )

    report_path = Path(args.report)
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write("# pair\tencoding\tbatch_a\tbatch_b\tmmd2\n")
        for report in (coord, geo):
            for (a, b), value in zip(report.pairs, report.values):
                fh.write(f"pair\t{report.encoding}\t{a}\t{b}\t{_fmt(value)}\n")
        for report in (coord, geo):
            fh.write(
                f"summary\t{report.encoding}\t{_fmt(report.min)}\t{_fmt(report.mean)}\t{_fmt(report.max)}\n"
            )
        fh.write(f"sigma\t{_fmt(coord.sigma)}\n")

    from .figures import save_mmd_figure

    save_mmd_figure(coord, geo, report_path.with_suffix(report_path.suffix + ".png"))
    print(
        f"mean MMD^2: coordinate {coord.mean:.4f}, geometric {geo.mean:.4f}",
        file=sys.stderr,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gera", description="non-rigid point cloud registration pipeline"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic registration dataset")
    p.add_argument("--bases", default="ellipsoid,sphere,tube",
                   help="comma-separated shape kinds or a directory of cloud files")
    p.add_argument("--count", type=int, default=30, help="number of base clouds")
    p.add_argument("--deform-mm", type=float, default=19.0)
    p.add_argument("--noise-mm-min", type=float, default=1.0)
    p.add_argument("--noise-mm-max", type=float, default=3.0)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--split", default="8:1:1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("encode", help="build descriptor caches for a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--n-desc", type=int, default=10)
    p.add_argument("--out", default=None, help="cache directory (default: <manifest dir>/desc)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train a registration model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--alpha", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-model", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="apply a trained model to a cloud pair")
    p.add_argument("--model", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="evaluate a model on the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mmd", help="encoding stability study")
    p.add_argument("--manifest", required=True)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--sigma", default="median")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_mmd)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        return _fail(str(exc))


def entrypoint() -> None:  # console script target
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

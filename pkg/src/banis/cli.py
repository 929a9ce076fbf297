"""Command-line entry point: ``banis <command> [options]``.

Every command accepts ``--config FILE`` and repeatable ``--set key=value``
overrides.  Outputs default to ``$BANIS_OUTPUT_ROOT/<command>-<hash>-seed<seed>``
and are never overwritten unless ``--force`` is given.  Failures print one
line ``ERROR <category>: <message>`` to stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, load_config
from .datagen import ManifestEntry, generate_dataset, read_manifest, resolve, write_manifest
from .errors import BanisError, ValidationError
from .gmi import GmiReport, binarize, compute_gmi, dsc, reconstruct_pairs
from .networks import inference_mode, module_dtype, sample_prior
from .pngio import load_mask_png, load_png, save_image_png, save_mask_png
from .preprocessing import build_splits, crop, preprocess_image, resize_bilinear
from .reporting import contact_sheet, format_table, plot_losses, summarize
from .training import Dataset, load_checkpoint, train, train_autoencoder_baseline

log = logging.getLogger("banis")

OUTPUT_ROOT_ENV = "BANIS_OUTPUT_ROOT"
SHEET_COLUMNS = 8


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"ERROR usage: {message}\n")


class OutputExists(BanisError, FileExistsError):
    category = "exists"


def _out_dir(args, cfg: RunConfig, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{command}-{cfg.hash[:12]}-seed{cfg.seed}"


def _claim_dir(path: Path, force: bool) -> Path:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise OutputExists(f"{path} already exists and is not empty; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _claim_file(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise OutputExists(f"{path} already exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _record(cfg: RunConfig, out: Path) -> None:
    (out / "run_config.cfg").write_text(cfg.dumps())


def _dataset(cfg: RunConfig, manifest) -> Dataset:
    train_pairs, test_pairs = build_splits(manifest, cfg.preprocess)
    return Dataset.from_pairs(train_pairs, test_pairs, cfg.domain_a)


# -- commands --------------------------------------------------------------


def cmd_datagen(args, cfg: RunConfig):
    n = args.n_pairs if args.n_pairs is not None else cfg.n_pairs
    out = _claim_dir(_out_dir(args, cfg, "datagen"), args.force)
    entries = generate_dataset(cfg.data, n, out, cfg.preprocess.test_fraction)
    _record(cfg, out)
    n_test = sum(e.split == "test" for e in entries)
    print(f"{out / 'manifest.csv'}: {len(entries) - n_test} train, {n_test} test")


def _transform_mask(mask, cfg):
    x = resize_bilinear(mask.astype(np.float64), cfg.intermediate_size)
    return crop(x, cfg.crop_size) > 0.5


def cmd_preprocess(args, cfg: RunConfig):
    entries = read_manifest(args.data)
    out = _claim_dir(_out_dir(args, cfg, "preprocess"), args.force)
    for sub in ("membrane", "nuclei", "membrane_mask", "nuclei_mask"):
        (out / sub).mkdir()
    written = []
    for e in entries:
        rel = {}
        for sub, src in (("membrane", e.membrane_path), ("nuclei", e.nuclei_path)):
            img = preprocess_image(load_png(resolve(args.data, src)), cfg.preprocess)
            rel[sub] = f"{sub}/{e.pair_id}.png"
            save_image_png(img, out / rel[sub])
        for sub, src in (("membrane_mask", e.membrane_mask_path), ("nuclei_mask", e.nuclei_mask_path)):
            rel[sub] = ""
            if src:
                m = _transform_mask(load_mask_png(resolve(args.data, src)), cfg.preprocess)
                rel[sub] = f"{sub}/{e.pair_id}.png"
                save_mask_png(m, out / rel[sub])
        written.append(ManifestEntry(e.pair_id, e.split, rel["membrane"], rel["nuclei"],
                                     rel["membrane_mask"], rel["nuclei_mask"], e.seed))
    write_manifest(written, out / "manifest.csv")
    _record(cfg, out)
    print(f"{out / 'manifest.csv'}: {len(written)} pairs")


def cmd_train(args, cfg: RunConfig):
    ds = _dataset(cfg, args.data)
    out = _out_dir(args, cfg, "train")
    if args.resume is None:
        _claim_dir(out, args.force)
    else:
        out.mkdir(parents=True, exist_ok=True)
    _record(cfg, out)
    res = train(ds, cfg.train, out, cfg.network, resume=args.resume, thresholds=cfg.eval.thresholds)
    print(f"{res.checkpoint} ({res.trainer.global_step} steps, {res.elapsed:.1f}s)")


def cmd_train_baseline(args, cfg: RunConfig):
    ds = _dataset(cfg, args.data)
    out = _claim_dir(_out_dir(args, cfg, "train-baseline"), args.force)
    _record(cfg, out)
    res = train_autoencoder_baseline(ds, cfg.train, out, cfg.network, cfg.eval.thresholds)
    print(f"{res.checkpoint} ({res.trainer.global_step} steps, {res.elapsed:.1f}s)")


def synthesize_from_prior(bundle, n: int, seed: int):
    gen = torch.Generator().manual_seed(seed)
    dtype = module_dtype(bundle)
    z = sample_prior(n, bundle.G_A.latent_dim, gen, dtype)
    with inference_mode(bundle):
        a = bundle.G_A(z).numpy()[:, 0]
        b = bundle.G_B(z).numpy()[:, 0]
    return a, b


def cmd_synth(args, cfg: RunConfig):
    if args.n < 1:
        raise ValidationError("n", f"must be >= 1, got {args.n}")
    trainer = load_checkpoint(args.ckpt)
    bundle = trainer.bundle
    out = _claim_dir(_out_dir(args, cfg, "synth"), args.force)
    _record(cfg, out)
    rows = []
    if args.mode == "from-prior":
        seed = cfg.seed if args.seed is None else args.seed
        gen_a, gen_b = synthesize_from_prior(bundle, args.n, seed)
        for i in range(args.n):
            save_image_png(gen_a[i], out / f"pair_{i:03d}_A.png")
            save_image_png(gen_b[i], out / f"pair_{i:03d}_B.png")
        for c in range(0, args.n, SHEET_COLUMNS):
            rows += [list(gen_a[c:c + SHEET_COLUMNS]), list(gen_b[c:c + SHEET_COLUMNS])]
        print(f"{args.n} pairs from the prior in {out}")
    else:
        if not args.data:
            raise ValidationError("data", "--mode from-test-set needs --data <manifest>")
        _, test = build_splits(args.data, cfg.preprocess)
        test = test[:args.n]
        if not test:
            raise ValidationError("data", "manifest has no test pairs")
        dom_a = trainer.domain_a
        dom_b = "nuclei" if dom_a == "membrane" else "membrane"
        recs = reconstruct_pairs(test, bundle, dom_a)
        dices = []
        obs_a, obs_b, syn_a, syn_b = [], [], [], []
        for p, (pid, rec_b, rec_a) in zip(test, recs):
            save_image_png(rec_a, out / f"{pid}_synth_A.png")
            save_image_png(rec_b, out / f"{pid}_synth_B.png")
            obs_a.append(getattr(p, dom_a))
            obs_b.append(getattr(p, dom_b))
            syn_a.append(rec_a)
            syn_b.append(rec_b)
            dices.append(dsc(binarize(rec_b), binarize(rec_a)))
        for c in range(0, len(test), SHEET_COLUMNS):
            s = slice(c, c + SHEET_COLUMNS)
            rows += [obs_a[s], obs_b[s], syn_a[s], syn_b[s]]
        print(f"{len(test)} reconstructed pairs in {out}; mean pair DSC {np.mean(dices):.4f}")
    contact_sheet(rows, out / "contact_sheet.png")


def cmd_eval(args, cfg: RunConfig):
    thresholds = cfg.eval.thresholds
    if args.thresholds:
        try:
            thresholds = tuple(float(t) for t in args.thresholds.split(","))
        except ValueError:
            raise ValidationError("thresholds", f"cannot parse {args.thresholds!r}") from None
    trainer = load_checkpoint(args.ckpt)
    _, test = build_splits(args.data, cfg.preprocess)
    report = compute_gmi(test, trainer.bundle, thresholds, args.binarize or cfg.eval.binarize,
                         domain_a=trainer.domain_a)
    out = _claim_file(Path(args.out) if args.out else _out_dir(args, cfg, "eval") / "report.csv",
                      args.force)
    report.write_csv(out)
    for t in report.thresholds:
        print(f"TS={t:g} matched_fraction={report.matched_fraction[t]:.4f}")


def cmd_report(args, cfg: RunConfig):
    groups = {}
    for spec in args.gmi or []:
        label, sep, paths = spec.partition("=")
        if not sep:
            label, paths = "banis", spec
        for p in paths.split(","):
            groups.setdefault(label, []).append(GmiReport.read_csv(p))
    out = _claim_dir(_out_dir(args, cfg, "report"), args.force)
    plots = []
    for m in args.metrics or []:
        sub = out / Path(m).parent.name if len(args.metrics) > 1 else out
        sub.mkdir(exist_ok=True)
        plots += plot_losses(m, sub)
    if groups:
        text = format_table(summarize(groups))
        (out / "summary.txt").write_text(text)
        print(text, end="")
    print(f"{len(plots)} plots in {out}")


# -- wiring ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key")
    common.add_argument("--out", help="output directory (file for eval)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="banis", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("datagen", parents=[common], help="generate synthetic membrane/nuclei pairs")
    s.add_argument("--n-pairs", type=int)
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("preprocess", parents=[common], help="condition raw 8-bit images")
    s.add_argument("--data", required=True, help="manifest of raw images")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="train the bidirectional model")
    s.add_argument("--data", required=True, help="dataset manifest")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("train-baseline", parents=[common], help="train the auto-encoder baseline")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_train_baseline)

    s = sub.add_parser("synth", parents=[common], help="synthesise image pairs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--mode", choices=("from-prior", "from-test-set"), default="from-prior")
    s.add_argument("--data", help="manifest (from-test-set mode)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", parents=[common], help="geometric matching index of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--thresholds", help="comma-separated, e.g. 0.1,0.2,0.3")
    s.add_argument("--binarize", choices=("fixed", "otsu"))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="summary table and loss plots")
    s.add_argument("--metrics", action="append", help="metrics.csv of a training run")
    s.add_argument("--gmi", action="append", metavar="LABEL=CSV[,CSV...]",
                   help="GMI report(s) of one model; repeat per model")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        args.func(args, cfg)
    except BanisError as exc:
        print(f"ERROR {exc.category}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt as exc:
        print(f"ERROR interrupted: {exc}", file=sys.stderr)
        return 130
    except OSError as exc:
        print(f"ERROR io: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

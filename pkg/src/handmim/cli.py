"""Command-line entry point: ``handmim <subcommand> [options]``.

Subcommands: ``pretrain``, ``finetune``, ``eval``, ``gen-data``, ``plot`` and
``ablation``. Failures print one line ``error category=<tag> message=<text>``
to stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data
from .config import RunConfig, load_config
from .errors import ConfigurationError, HandMIMError, IngestionError
from .hand_model import HandModelData, synhand
from .trainer import Finetuner, Pretrainer, evaluate, teacher_backbone_arrays

log = logging.getLogger("handmim")

TEST_SEED_OFFSET = 100_000  # synthetic test sets never share a seed with training sets


def _config(args, mode: str) -> RunConfig:
    cfg = load_config(args.config, mode) if args.config else RunConfig.for_mode(mode)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "freeze_blocks", None) is not None:
        cfg.freeze_blocks = args.freeze_blocks
    if getattr(args, "epochs", None) is not None:
        cfg.optimizer.epochs = args.epochs
    for term in getattr(args, "ablate", None) or ():
        setattr(cfg.loss, f"w_{term}", 0.0)
    cfg.validate()
    return cfg


def _hand(args) -> HandModelData:
    path = getattr(args, "hand_model", None)
    return HandModelData.load(path) if path else synhand()


def _labeled(path, n, seed, hand, size) -> List[data.Sample]:
    if path:
        samples = data.load_freihand_dir(path)
        if not samples:
            raise IngestionError(f"no samples found in {path}")
        return samples
    return data.generate_dataset(n, seed, hand, data.GenConfig(image_size=size))


def _write_history(path: Path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def cmd_pretrain(args) -> int:
    cfg = _config(args, "pretrain")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = cfg.vit_config.image_size
    if args.data:
        images = data.ImageStore.open(args.data).load_all()
    else:
        samples = data.generate_dataset(cfg.data.n_pretrain, cfg.seed, _hand(args), data.GenConfig(image_size=size))
        images = data.build_pretrain_corpus([samples], out / "corpus", size, cfg.data.crop_ratio).load_all()
    if len(images) == 0:
        raise IngestionError("pre-training corpus is empty")
    trainer = Pretrainer(cfg, src_size=images.shape[1])
    history = trainer.fit(images, cfg.optimizer.epochs)
    trainer.save(out / "pretrain.ckpt")
    _write_history(out / "history.jsonl", history)
    (out / "config.txt").write_text(cfg.dumps())
    print(json.dumps({"checkpoint": str(out / "pretrain.ckpt"), "final": history[-1]}, sort_keys=True))
    return 0


def cmd_finetune(args) -> int:
    mode = "partial_finetune" if (args.freeze_blocks or 0) > 0 else "finetune"
    cfg = _config(args, mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hand = _hand(args)
    samples = _labeled(args.data, cfg.data.n_train, cfg.seed, hand, cfg.vit_config.image_size)
    pretrained = teacher_backbone_arrays(args.pretrained) if args.pretrained else None
    tuner = Finetuner(cfg, hand, pretrained)
    history = tuner.fit(samples, cfg.optimizer.epochs)
    tuner.save(out / "finetune.ckpt")
    _write_history(out / "history.jsonl", history)
    (out / "config.txt").write_text(cfg.dumps())
    print(json.dumps({"checkpoint": str(out / "finetune.ckpt"), "final": history[-1]}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    hand = _hand(args)
    tuner = Finetuner.load(args.checkpoint, hand)
    cfg = tuner.cfg
    seed = TEST_SEED_OFFSET + (args.seed if args.seed is not None else cfg.seed)
    samples = _labeled(args.data, args.n or cfg.data.n_test, seed, hand, cfg.vit_config.image_size)
    report = evaluate(samples, tuner.predict, hand, args.out)
    print(report.to_json())
    return 0


def cmd_gen_data(args) -> int:
    hand = _hand(args)
    samples = data.generate_dataset(args.n, args.seed, hand, data.GenConfig(image_size=args.image_size))
    out = data.save_freihand_dir(samples, args.out)
    hand.save(out / "hand_model.zip")
    print(json.dumps({"out": str(out), "n": len(samples)}))
    return 0


def _read_curves(path: Path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise IngestionError(f"{path} has no rows")
    cols = {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}
    return cols["threshold_mm"], cols["pck_pose"], cols["pck_mesh"]


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    src = Path(args.eval_dir)
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    curves = src / "curves.csv"
    if not curves.exists():
        raise IngestionError(f"{curves} not found; run eval first")
    th, pose, mesh = _read_curves(curves)
    for name, pck, label in (("auc_pose", pose, "3D keypoints"), ("auc_mesh", mesh, "mesh vertices")):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        ax.plot(th, pck, lw=2, label=f"this run (AUC {pck.mean():.3f})")
        ax.set_xlim(0, th[-1])
        ax.set_ylim(0, 1)
        ax.set_xlabel("error threshold (mm)")
        ax.set_ylabel("PCK")
        ax.set_title(f"PA-aligned PCK, {label}")
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(out / f"{name}.png", dpi=100)
        plt.close(fig)
    if out.resolve() != src.resolve():
        shutil.copyfile(curves, out / "curves.csv")
    print(json.dumps({"out": str(out), "files": ["auc_pose.png", "auc_mesh.png", "curves.csv"]}))
    return 0


def cmd_ablation(args) -> int:
    """Pre-train once per removed loss term, fine-tune each, and tabulate test errors."""
    cfg = _config(args, "pretrain")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hand = _hand(args)
    size = cfg.vit_config.image_size
    gen = data.GenConfig(image_size=size)
    pool = data.generate_dataset(cfg.data.n_pretrain, cfg.seed, hand, gen)
    images = data.build_pretrain_corpus([pool], out / "corpus", size, cfg.data.crop_ratio).load_all()
    train = data.generate_dataset(args.n_train, cfg.seed + 1, hand, gen)
    test = data.generate_dataset(args.n_test, TEST_SEED_OFFSET + cfg.seed, hand, gen)
    rows = []
    for term in ("pose", "patch", "recon"):
        run_cfg = RunConfig.from_dict(cfg.to_dict())
        setattr(run_cfg.loss, f"w_{term}", 0.0)
        pre = Pretrainer(run_cfg, src_size=images.shape[1])
        hist = pre.fit(images, run_cfg.optimizer.epochs)
        ckpt = pre.save(out / f"without_{term}.ckpt")
        ft_cfg = RunConfig.for_mode("finetune", seed=cfg.seed, vit=cfg.vit)
        ft_cfg.optimizer.epochs = args.finetune_epochs
        ft_cfg.optimizer.lr = args.finetune_lr
        tuner = Finetuner(ft_cfg, hand, teacher_backbone_arrays(ckpt))
        tuner.fit(train, ft_cfg.optimizer.epochs)
        report = evaluate(test, tuner.predict, hand)
        rows.append(
            {
                "removed": term,
                "w_pose": run_cfg.loss.w_pose,
                "w_patch": run_cfg.loss.w_patch,
                "w_recon": run_cfg.loss.w_recon,
                "final_pretrain_total": hist[-1]["total"],
                "pajpe_mm": report.pajpe,
                "pavpe_mm": report.pavpe,
            }
        )
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(json.dumps(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="handmim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="key = value config file")
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--hand-model", help="hand-model archive (default: built-in SynHand)")

    sp = sub.add_parser("pretrain", help="self-supervised pre-training")
    common(sp)
    sp.add_argument("--data", help="image store directory (default: synthetic crops)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--ablate", action="append", choices=("pose", "patch", "recon"), help="zero a loss weight")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="supervised mesh fine-tuning")
    common(sp)
    sp.add_argument("--data", help="FreiHAND-style directory (default: synthetic)")
    sp.add_argument("--pretrained", help="pre-training checkpoint; its teacher backbone initialises the network")
    sp.add_argument("--freeze-blocks", type=int, default=None)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="FreiHAND-style directory (default: synthetic test set)")
    sp.add_argument("--n", type=int, help="synthetic test-set size")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gen-data", help="write a synthetic FreiHAND-style dataset")
    sp.add_argument("--hand-model")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--image-size", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("plot", help="PCK/AUC plots from an eval output directory")
    sp.add_argument("eval_dir")
    sp.add_argument("--out", help="output directory (default: eval_dir)")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("ablation", help="three-row loss ablation report")
    common(sp)
    sp.add_argument("--epochs", type=int, help="pre-training epochs per row")
    sp.add_argument("--n-train", type=int, default=100)
    sp.add_argument("--n-test", type=int, default=50)
    sp.add_argument("--finetune-epochs", type=int, default=5)
    sp.add_argument("--finetune-lr", type=float, default=1e-3)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablation)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except HandMIMError as exc:
        category, message = exc.category, str(exc)
    except (OSError, KeyError, ValueError) as exc:
        category, message = ("io" if isinstance(exc, OSError) else "input"), f"{type(exc).__name__}: {exc}"
    print(f"error category={category} message={json.dumps(message)}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command line interface.

Heavy imports (torch, numpy) happen inside the subcommands that need them so
that the pure-stdlib ``gloss`` path stays fast.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cuedgen",
        description="Cued Speech gesture generation pipeline",
    )
    parser.add_argument("--config", help="JSON config file with TrainConfig fields")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gloss", help="compile pinyin text to instructional gloss")
    p.add_argument("--input", required=True, help="pinyin text, or a path to a text file")
    p.add_argument("--table", help="mapping table JSON (default: built-in)")
    p.add_argument("--backend", choices=["rules", "llm"], default="rules")
    p.add_argument("--out", help="write the gloss here instead of stdout")

    p = sub.add_parser("synth", help="render a synthetic oracle corpus")
    p.add_argument("--sentences", help="file with one pinyin sentence per line")
    p.add_argument("--count", type=int, default=50, help="random sentences when no file given")
    p.add_argument("--offset", type=float, default=0.2, help="hand lead over audio, seconds")
    p.add_argument("--noise", type=float, default=0.5, help="landmark jitter std, mm")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train-ae", help="train the motion autoencoder stage")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--out", required=True, help="run directory for checkpoints")

    p = sub.add_parser("train-clip", help="train the gloss/motion encoder pair")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-diffusion",
                       help="train the noise predictor and rhythm generator "
                            "(needs ae.pt and clip.pt in the run directory)")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--steps", type=int, default=1000, help="diffusion steps")
    p.add_argument("--drop", type=float, default=0.1, help="condition dropout probability")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run every training stage in order")
    p.add_argument("--data-dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="run directory (default from config)")

    p = sub.add_parser("generate", help="generate a landmark file for one sentence")
    p.add_argument("--text", required=True)
    p.add_argument("--audio", help="WAV file; synthesized from the units when omitted")
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--run-dir", required=True, help="directory with trained checkpoints")
    p.add_argument("--out", required=True, help="output landmark file (.json or .bin)")

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--segs", help="directory with <stem>.gesture_segs.json / "
                                  "<stem>.audio_segs.json for GAD")
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--delta", type=float, default=10.0)
    p.add_argument("--ae", help="autoencoder checkpoint enabling FGD")
    p.add_argument("--report", required=True, help="output JSON report path")

    p = sub.add_parser("dump-embeddings", help="write raw embedding matrices")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="output .npz path")

    return parser


def cmd_gloss(args) -> int:
    from .rules import MappingTable, compile_gloss, gloss_via_llm

    table = MappingTable.load(args.table) if args.table else MappingTable.default()
    text = args.input
    if os.path.exists(text):
        with open(text, "r", encoding="utf-8") as fh:
            text = fh.read().strip()
    if args.backend == "llm":
        gloss = gloss_via_llm(text, table=table)
    else:
        gloss = compile_gloss(text, table)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(gloss.text + "\n")
    else:
        print(gloss.text)
    return 0


def cmd_synth(args, seed: int) -> int:
    from .pipeline import save_corpus
    from .synthetic import make_corpus, sample_sentences

    if args.sentences:
        with open(args.sentences, "r", encoding="utf-8") as fh:
            sentences = [line.strip() for line in fh if line.strip()]
    else:
        sentences = sample_sentences(args.count, seed=seed)
    items = make_corpus(sentences, seed=seed, offset=args.offset, noise=args.noise)
    save_corpus(items, args.out_dir)
    print(f"wrote {len(items)} items to {args.out_dir}")
    return 0


def _load_config(args):
    from .pipeline import TrainConfig

    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    return config


def _load_items(data_dir, config):
    from .pipeline import load_corpus, split_dataset

    items = load_corpus(data_dir, table=config.table())
    return split_dataset(items, ratio=config.split_ratio, seed=config.seed)


def cmd_train_ae(args) -> int:
    from .pipeline import Pipeline, RunManifest
    from dataclasses import asdict
    from pathlib import Path

    config = _load_config(args)
    config.data_dir = args.data_dir
    train_items, _ = _load_items(args.data_dir, config)
    pipe = Pipeline(config)
    losses = pipe.train_ae(train_items, args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.fresh("train-ae", asdict(config), config.seed)
    manifest.losses = {"autoencoder": losses}
    pipe.save(out, manifest)
    config.save(out / "config.json")
    manifest.save(out / "manifest-ae.json")
    print(f"autoencoder loss {losses[0]:.5f} -> {losses[-1]:.5f}")
    return 0


def cmd_train_clip(args) -> int:
    from .pipeline import Pipeline, RunManifest
    from .autoencoder import load_ae_checkpoint
    from dataclasses import asdict
    from pathlib import Path

    config = _load_config(args)
    config.data_dir = args.data_dir
    config.batch_size = args.batch
    config.temperature = args.temperature
    train_items, _ = _load_items(args.data_dir, config)
    pipe = Pipeline(config)
    ae_path = Path(args.out) / "ae.pt"
    if ae_path.exists():
        pipe.ae = load_ae_checkpoint(ae_path)
    losses = pipe.train_clip(train_items, args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.fresh("train-clip", asdict(config), config.seed)
    manifest.losses = {"gloss_clip": losses}
    pipe.save(out, manifest)
    manifest.save(out / "manifest-clip.json")
    print(f"contrastive loss {losses[0]:.5f} -> {losses[-1]:.5f}")
    return 0


def cmd_train_diffusion(args) -> int:
    from .pipeline import Pipeline, RunManifest, mean_motion
    from .autoencoder import load_ae_checkpoint
    from .encoders import load_clip_checkpoint
    from .errors import MissingCheckpoint
    from dataclasses import asdict
    from pathlib import Path

    config = _load_config(args)
    config.data_dir = args.data_dir
    config.batch_size = args.batch
    config.diffusion_steps = args.steps
    config.p_drop = args.drop
    train_items, _ = _load_items(args.data_dir, config)
    out = Path(args.out)
    pipe = Pipeline(config)
    for name, loader, attr in (("ae.pt", load_ae_checkpoint, "ae"),
                               ("clip.pt", load_clip_checkpoint, "clip")):
        path = out / name
        if not path.exists():
            raise MissingCheckpoint(f"{path} not found; run train-ae/train-clip first")
        setattr(pipe, attr, loader(path))
    pipe.mean = mean_motion([it.motion for it in train_items],
                            length=config.canonical_length)
    history = pipe.train_diffusion(train_items, args.epochs)
    manifest = RunManifest.fresh("train-diffusion", asdict(config), config.seed)
    manifest.losses = {f"diffusion_{k}": v for k, v in history.items()}
    pipe.save(out, manifest)
    config.save(out / "config.json")
    manifest.save(out / "manifest.json")
    print(f"total loss {history['total'][0]:.5f} -> {history['total'][-1]:.5f}")
    return 0


def cmd_train(args) -> int:
    from .pipeline import run_train

    config = _load_config(args)
    if args.data_dir:
        config.data_dir = args.data_dir
    if args.out:
        config.out_dir = args.out
    _, manifest = run_train(config, epochs=args.epochs)
    print(f"run complete; manifest at {config.out_dir}/manifest.json")
    if manifest.losses:
        total = manifest.losses.get("diffusion_total")
        if total:
            print(f"total loss {total[0]:.5f} -> {total[-1]:.5f}")
    return 0


def cmd_generate(args, seed: int) -> int:
    from .pipeline import run_generate

    motion, _ = run_generate(
        args.text, args.run_dir, args.out,
        audio_path=args.audio, seed=seed, guidance=args.guidance,
    )
    print(f"wrote {motion.length} frames to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    import glob as globlib

    import numpy as np

    from . import metrics as metrics_mod
    from .motion import load_motion, load_segments, resample_frames
    from .pipeline import file_sha256

    def index_dir(directory):
        found = {}
        for path in sorted(globlib.glob(os.path.join(directory, "*.motion.*"))):
            stem = os.path.basename(path).split(".motion.")[0]
            found[stem] = path
        return found

    preds, gts = index_dir(args.pred_dir), index_dir(args.gt_dir)
    stems = sorted(set(preds) & set(gts))
    if not stems:
        print("no matching <stem>.motion.* files between the two directories",
              file=sys.stderr)
        return 2
    pairs = []
    seg_pairs = []
    for stem in stems:
        pred, gt = load_motion(preds[stem]), load_motion(gts[stem])
        if pred.length != gt.length:
            pred = pred.with_frames(resample_frames(pred.frames, gt.length))
        pairs.append((pred, gt))
        if args.segs:
            g_path = os.path.join(args.segs, f"{stem}.gesture_segs.json")
            a_path = os.path.join(args.segs, f"{stem}.audio_segs.json")
            if os.path.exists(g_path) and os.path.exists(a_path):
                seg_pairs.append((load_segments(g_path), load_segments(a_path)))
    extractor = None
    extractor_hash = None
    if args.ae:
        from .autoencoder import load_ae_checkpoint
        from .motion import MotionSequence

        ae = load_ae_checkpoint(args.ae)
        extractor_hash = file_sha256(args.ae)
        length = 48 if 48 % ae.downsample == 0 else ae.downsample * 12

        def extractor(motion):
            frames = resample_frames(motion.frames, length)
            seq = MotionSequence(frames, fps=motion.fps, joint_map=dict(motion.joint_map))
            return ae.encode(seq).codes.ravel()

    report = metrics_mod.evaluate_pairs(
        pairs, pck_threshold_mm=args.delta, gad_tau_s=args.tau,
        seg_pairs=seg_pairs or None, extractor=extractor,
        extractor_sha256=extractor_hash,
    )
    report.save(args.report)
    print(report.to_json())
    return 0


def cmd_dump_embeddings(args) -> int:
    from .encoders import load_clip_checkpoint
    from .pipeline import dump_embeddings, load_corpus
    from .errors import MissingCheckpoint
    from pathlib import Path

    clip_path = Path(args.run_dir) / "clip.pt"
    if not clip_path.exists():
        raise MissingCheckpoint(f"{clip_path} not found")
    clip = load_clip_checkpoint(clip_path)
    items = load_corpus(args.data_dir)
    dump_embeddings(clip, items, args.out)
    print(f"wrote embeddings for {len(items)} items to {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    seed = args.seed if args.seed is not None else 0
    try:
        if args.command == "gloss":
            return cmd_gloss(args)
        if args.command == "synth":
            return cmd_synth(args, seed)
        if args.command == "train-ae":
            return cmd_train_ae(args)
        if args.command == "train-clip":
            return cmd_train_clip(args)
        if args.command == "train-diffusion":
            return cmd_train_diffusion(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "generate":
            return cmd_generate(args, seed)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "dump-embeddings":
            return cmd_dump_embeddings(args)
        raise AssertionError(f"unhandled command {args.command}")
    except BrokenPipeError:
        return 0


if __name__ == "__main__":
    sys.exit(main())

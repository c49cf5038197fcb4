"""Command-line pipeline: synthesize, estimate, pretrain, finetune, predict,
evaluate, augment, and render reports.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure. The
environment variable AUVMAE_THREADS caps internal parallelism. All randomness
derives from --seed through the key-derivation scheme in auvmae.seeds.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .knowledge import estimate_inter_knowledge, estimate_intra_knowledge, load_knowledge, save_knowledge
from .labels import (
    AugmentPlan,
    augment_dataset,
    class_weights,
    load_label_sequences,
    occurrence_rates,
    save_label_sequences,
)
from .metrics import f1_scores, knowledge_comparison_dump, learned_statistics
from .model import (
    LEVELS,
    ModelConfig,
    PredictionBatch,
    finetune,
    load_checkpoint,
    predict,
    pretrain,
    save_checkpoint,
)
from .seeds import derive_seed
from .synth import (
    GeneratorSpec,
    RenderSpec,
    default_generator_spec,
    default_render_spec,
    sample_dataset,
)
from .video import load_video_clips, save_video_clips


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _apply_thread_cap() -> None:
    cap = os.environ.get("AUVMAE_THREADS")
    if cap:
        try:
            threads = int(cap)
        except ValueError:
            raise DataError(f"AUVMAE_THREADS must be an integer, got '{cap}'") from None
        if threads < 1:
            raise DataError("AUVMAE_THREADS must be >= 1")
        import torch

        torch.set_num_threads(threads)


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _pair_videos_labels(videos_path: str, labels_path: str):
    clips = load_video_clips(videos_path)
    sequences = load_label_sequences(labels_path)
    by_id = {s.clip_id: s for s in sequences}
    if len(by_id) != len(sequences):
        raise DataError(f"{labels_path}: duplicate clip ids")
    missing = [c.clip_id for c in clips if c.clip_id not in by_id]
    if missing:
        raise DataError(f"clips without labels: {missing[:5]}")
    extra = set(by_id) - {c.clip_id for c in clips}
    if extra:
        raise DataError(f"labels without clips: {sorted(extra)[:5]}")
    dataset = []
    for clip in clips:
        seq = by_id[clip.clip_id]
        if seq.num_frames != clip.num_frames:
            raise DataError(f"clip '{clip.clip_id}': video/label length mismatch")
        dataset.append((clip, seq))
    return dataset


def _log_writer(path: str | None):
    if path is None:
        return None, None
    handle = Path(path).open("w")

    def on_step(step, report):
        handle.write(report.json_line(step) + "\n")

    return on_step, handle


def cmd_synth(args) -> int:
    gspec = GeneratorSpec.from_json(args.spec) if args.spec else default_generator_spec(seed=args.seed)
    rspec = RenderSpec.from_json(args.render) if args.render else default_render_spec()
    if args.frames < 2 * args.clip_len:
        raise DataError(f"--frames {args.frames} yields fewer than 2 clips of length {args.clip_len}")
    num_clips = args.frames // args.clip_len
    dataset = sample_dataset(gspec, rspec, num_clips, args.clip_len, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_label_sequences(out / "labels.csv", [s for _, s in dataset])
    save_video_clips(out / "videos.bin", [c for c, _ in dataset])
    _write_json(
        out / "meta.json",
        {"seed": args.seed, "num_clips": num_clips, "clip_len": args.clip_len,
         "au_ids": list(dataset[0][1].au_ids)},
    )
    print(f"wrote {num_clips} clips to {out}")
    return 0


def cmd_estimate_knowledge(args) -> int:
    sequences = load_label_sequences(args.labels)
    intra = estimate_intra_knowledge(sequences)
    inter = estimate_inter_knowledge(sequences)
    save_knowledge(args.out, intra, inter)
    print(f"wrote priors for {len(intra.au_ids)} AUs to {args.out}")
    return 0


def _config_from_clips(clips, args, rate: int) -> ModelConfig:
    t, h, w, c = clips[0].pixels.shape
    fields = dict(
        clip_len=t, height=h, width=w, channels=c,
        downsample_rate=rate, seed=args.seed,
    )
    if args.mask_ratio is not None:
        fields["pretrain_mask_ratio"] = args.mask_ratio
    if args.steps is not None:
        fields["pretrain_steps"] = args.steps
    return ModelConfig(**fields)


def cmd_pretrain(args) -> int:
    clips = load_video_clips(args.videos)
    if not clips:
        raise DataError(f"{args.videos}: no clips")
    if args.downsample_rate is not None:
        rate = args.downsample_rate
    else:
        rate = ModelConfig().frame_level_rate if args.level == "frame" else 1
    config = _config_from_clips(clips, args, rate)
    on_step, handle = _log_writer(args.log)
    try:
        checkpoint = pretrain(clips, config, on_step=on_step)
    finally:
        if handle:
            handle.close()
    save_checkpoint(args.out, checkpoint)
    print(f"pretrained {config.pretrain_steps} steps at rate {rate}; wrote {args.out}")
    return 0


def cmd_finetune(args) -> int:
    dataset = _pair_videos_labels(args.videos, args.labels)
    priors = load_knowledge(args.priors)
    init = load_checkpoint(args.checkpoint)
    weights = class_weights(occurrence_rates([s for _, s in dataset]))
    overrides = {"seed": args.seed}
    if args.steps is not None:
        overrides["finetune_steps"] = args.steps
    if args.lambda_intra is not None:
        overrides["lambda_intra"] = args.lambda_intra
    if args.lambda_inter is not None:
        overrides["lambda_inter"] = args.lambda_inter
    if args.mask_ratio is not None:
        overrides["patch_mask_ratio"] = args.mask_ratio
    if args.batch_clips is not None:
        overrides["batch_clips"] = args.batch_clips
    config = dataclasses.replace(init.config, **overrides)
    on_step, handle = _log_writer(args.log)
    try:
        checkpoint = finetune(dataset, priors, weights, args.level, init, config=config, on_step=on_step)
    finally:
        if handle:
            handle.close()
    save_checkpoint(args.out, checkpoint)
    print(f"finetuned at {args.level} level for {config.finetune_steps} steps; wrote {args.out}")
    return 0


def cmd_predict(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    clips = load_video_clips(args.videos)
    if not checkpoint.config.au_ids:
        raise DataError("checkpoint has no trained classifier head (pretrain-only?)")
    entries = []
    for clip in clips:
        batch = predict(checkpoint, clip, args.level, mask_seed=derive_seed(args.seed, "predict", clip.clip_id))
        entries.append({"clip_id": clip.clip_id, "probs": batch.probs.tolist()})
    doc = {
        "level": args.level,
        "seed": args.seed,
        "au_ids": list(checkpoint.config.au_ids),
        "clips": entries,
    }
    _write_json(Path(args.out), doc)
    print(f"wrote predictions for {len(entries)} clips to {args.out}")
    return 0


def _load_predictions(path: str):
    try:
        doc = json.loads(Path(path).read_text())
        level = doc["level"]
        au_ids = tuple(int(a) for a in doc["au_ids"])
        batches = [
            PredictionBatch(probs=np.array(entry["probs"], dtype=np.float64), level=level, clip_id=entry["clip_id"])
            for entry in doc["clips"]
        ]
    except FileNotFoundError:
        raise DataError(f"prediction file not found: {path}") from None
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed prediction document ({exc})") from exc
    return batches, au_ids, doc


def cmd_eval(args) -> int:
    batches, au_ids, doc = _load_predictions(args.preds)
    sequences = load_label_sequences(args.labels)
    if sequences and sequences[0].au_ids != au_ids:
        raise DataError(f"prediction au_ids {au_ids} differ from label au_ids {sequences[0].au_ids}")
    by_id = {s.clip_id: s for s in sequences}
    missing = [b.clip_id for b in batches if b.clip_id not in by_id]
    if missing:
        raise DataError(f"predictions without labels: {missing[:5]}")
    labels = [by_id[b.clip_id] for b in batches]
    report = f1_scores(batches, labels, threshold=args.threshold)
    out_doc = json.loads(report.to_json())
    out_doc["level"] = doc["level"]
    out_doc["seed"] = doc["seed"]
    _write_json(Path(args.out), out_doc)
    if args.csv:
        report.to_csv(args.csv)
    print(f"avg F1 {report.avg_f1:.4f}, avg ACC {report.avg_acc:.4f}; wrote {args.out}")
    return 0


def cmd_augment(args) -> int:
    dataset = _pair_videos_labels(args.videos, args.labels)
    plan = AugmentPlan.from_json(args.plan)
    augmented = augment_dataset(dataset, plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_label_sequences(out / "labels.csv", [s for _, s in augmented])
    save_video_clips(out / "videos.bin", [c for c, _ in augmented])
    _write_json(
        out / "meta.json",
        {"seed": plan.seed, "source_clips": len(dataset), "total_clips": len(augmented)},
    )
    print(f"augmented {len(dataset)} -> {len(augmented)} clips in {out}")
    return 0


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    priors = load_knowledge(args.priors)
    learned = None
    if args.preds:
        batches, au_ids, _ = _load_predictions(args.preds)
        if au_ids != priors[0].au_ids:
            raise DataError(f"prediction au_ids {au_ids} differ from prior au_ids {priors[0].au_ids}")
        learned = learned_statistics(batches, au_ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = knowledge_comparison_dump(priors, learned)
    doc["seed"] = args.seed
    _write_json(out / "comparison.json", doc)

    intra, inter = priors
    n = len(intra.au_ids)
    cols = 2 if learned is not None else 1
    fig, axes = plt.subplots(1, cols, figsize=(4 * cols, 3.5), squeeze=False)
    names = [str(a) for a in intra.au_ids]

    def heat(ax, matrix, title):
        im = ax.imshow(np.nan_to_num(matrix), vmin=0.0, vmax=1.0, cmap="viridis")
        ax.set_title(title)
        ax.set_xticks(range(n), names)
        ax.set_yticks(range(n), names)
        fig.colorbar(im, ax=ax, fraction=0.046)

    heat(axes[0][0], intra.matrix, "prior co-occurrence")
    if learned is not None:
        heat(axes[0][1], learned.intra, "learned co-occurrence")
    fig.tight_layout()
    fig.savefig(out / "knowledge_intra.png", dpi=120)
    plt.close(fig)

    rows = 2 if learned is not None else 1
    fig, axes = plt.subplots(rows, 1, figsize=(7, 2.5 * rows), squeeze=False)
    axes[0][0].imshow(np.nan_to_num(inter.tensor).reshape(n * n, 16), aspect="auto", vmin=0, vmax=1, cmap="viridis")
    axes[0][0].set_title("prior transition distribution (pair x state)")
    if learned is not None:
        axes[1][0].imshow(np.nan_to_num(learned.inter).reshape(n * n, 16), aspect="auto", vmin=0, vmax=1, cmap="viridis")
        axes[1][0].set_title("learned transition distribution")
    fig.tight_layout()
    fig.savefig(out / "knowledge_inter.png", dpi=120)
    plt.close(fig)

    if args.metrics:
        try:
            metrics_doc = json.loads(Path(args.metrics).read_text())
        except FileNotFoundError:
            raise DataError(f"metrics file not found: {args.metrics}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.metrics}: invalid JSON ({exc})") from exc
        try:
            lines = ["au_id,f1,acc"]
            for au, f1, acc in zip(metrics_doc["au_ids"], metrics_doc["per_au_f1"], metrics_doc["per_au_acc"]):
                lines.append(f"{au},{f1:.6f},{acc:.6f}")
            lines.append(f"avg,{metrics_doc['avg_f1']:.6f},{metrics_doc['avg_acc']:.6f}")
        except (KeyError, TypeError) as exc:
            raise DataError(f"{args.metrics}: malformed metrics document ({exc})") from exc
        (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote report artifacts to {out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="auvmae", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample a synthetic labeled video dataset")
    p.add_argument("--spec", help="generator spec JSON (default: built-in 4-AU chain)")
    p.add_argument("--render", help="render spec JSON (default: built-in four-region renderer)")
    p.add_argument("--frames", type=int, default=4096, help="total frames to generate")
    p.add_argument("--clip-len", type=int, default=16, help="frames per clip")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate-knowledge", help="estimate pair knowledge from labels")
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="output priors JSON path")
    p.set_defaults(func=cmd_estimate_knowledge)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    p.add_argument("--videos", required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--level", choices=LEVELS, default="video",
                   help="intended fine-tuning level (sets the downsampling rate)")
    p.add_argument("--downsample-rate", type=int, help="override the rate directly")
    p.add_argument("--mask-ratio", type=float, help="pretraining tube-mask ratio (default 0.9)")
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="write per-step loss JSON lines here")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the per-frame AU classifier")
    p.add_argument("--videos", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--priors", required=True)
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint to start from")
    p.add_argument("--level", choices=LEVELS, required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-intra", type=float, help="co-occurrence loss weight (default 0.01)")
    p.add_argument("--lambda-inter", type=float, help="transition loss weight (default 0.01)")
    p.add_argument("--mask-ratio", type=float, help="patch-level tube-mask ratio (default 0.5)")
    p.add_argument("--batch-clips", type=int, help="clips per step (0 = whole dataset)")
    p.add_argument("--log", help="write per-step loss JSON lines here")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="per-frame probabilities for a clip container")
    p.add_argument("--videos", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--level", choices=LEVELS, required=True)
    p.add_argument("--seed", type=int, default=0, help="seed for patch-level mask sampling")
    p.add_argument("--out", required=True, help="output predictions JSON path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against labels")
    p.add_argument("--preds", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output metrics JSON path")
    p.add_argument("--csv", help="also write a per-AU CSV table here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="append minority-AU sub-clips per an augment plan")
    p.add_argument("--videos", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--plan", required=True, help="augment plan JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("report", help="render knowledge heatmaps and metric tables")
    p.add_argument("--priors", required=True)
    p.add_argument("--preds", help="predictions JSON for learned-vs-prior comparison")
    p.add_argument("--metrics", help="metrics JSON to tabulate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_thread_cap()
        return args.func(args)
    except DataError as exc:
        print(f"auvmae: data error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"auvmae: data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"auvmae: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

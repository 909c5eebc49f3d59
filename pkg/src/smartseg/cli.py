"""Command-line entry point.

    smartseg generate [--labeled N --unlabeled N] OUT
    smartseg finetune [--ablate tpt] DATA OUT
    smartseg train --teacher T.ckpt [--ablate ccr|dstc|tpt ...] DATA OUT
    smartseg evaluate --checkpoint S.ckpt [--plot [--log LOG]] DATA OUT
    smartseg ablate DATA OUT

Every command accepts ``--seed``, ``--config`` (flat ``key = value`` file),
``--force`` (replace a non-empty output directory) and ``--out``.
"""

import argparse
import json
import logging
import os
import shutil
import sys
import time

from . import dataio
from .backbone import PromptKind
from .flow import FlowKind, FlowProvider
from .metrics import evaluate_clips, predict_masks, reports_to_csv, summarize
from .synthdata import make_dataset
from .trainer import (COMPONENTS, DESK_OVERRIDES, CheckpointError, TrainConfig,
                      build_student, build_teacher, finetune_teacher, load_checkpoint,
                      run_ablation_suite, save_checkpoint, table2_csv, table3_csv, train_student)

log = logging.getLogger("smartseg")

LOG_NAME = "log.jsonl"


class CliError(Exception):
    """A user-facing failure: printed as a one-line diagnostic, exit status 1."""


# ---------------------------------------------------------------------------
# shared plumbing


def resolve_config(args) -> TrainConfig:
    flat = {k: str(v) for k, v in DESK_OVERRIDES.items()}
    if args.config:
        if not os.path.exists(args.config):
            raise CliError(f"config file not found: {args.config}")
        flat.update(dataio.read_config_file(args.config))
    if args.seed is not None:
        flat["seed"] = str(args.seed)
    try:
        return TrainConfig.from_flat(flat)
    except KeyError as exc:
        raise CliError(f"invalid config: {exc.args[0]}") from exc
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}") from exc


def prepare_out(args):
    out = args.out or args.out_pos
    if not out:
        raise CliError("no output directory given (positional OUT or --out)")
    data = getattr(args, "data", None)
    if data and os.path.abspath(out) == os.path.abspath(data):
        raise CliError("output directory must differ from the dataset directory")
    if os.path.isdir(out) and os.listdir(out):
        if not args.force:
            raise CliError(f"output directory {out} is not empty (use --force to replace it)")
        shutil.rmtree(out)
    os.makedirs(out, exist_ok=True)
    return out


def load_data(path):
    try:
        return dataio.read_dataset(path)
    except (FileNotFoundError, dataio.FormatError) as exc:
        raise CliError(f"invalid dataset directory {path}: {exc}") from exc


def load_ckpt(path, what):
    if not path or not os.path.exists(path):
        raise CliError(f"{what} checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(str(exc)) from exc


class JsonlLog:
    def __init__(self, path):
        self.fh = open(path, "w")

    def __call__(self, rec):
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


def _ablation(cfg, off):
    return cfg.replace(ablation=frozenset(COMPONENTS) - {c.upper() for c in off})


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    if args.labeled < 1:
        raise CliError("--labeled must be >= 1")
    if args.unlabeled < 0:
        raise CliError("--unlabeled must be >= 0")
    seed = 0 if args.seed is None else args.seed
    out = prepare_out(args)
    params = {"labeled": args.labeled, "unlabeled": args.unlabeled, "labeled_frames": args.labeled_frames,
              "frames": args.frames, "size": args.size, "seed": seed}
    manifest = dataio.RunManifest("generate", dataio.hash_mapping(params), seed,
                                  config={k: str(v) for k, v in params.items()})
    lab, unl, test = make_dataset(args.labeled, args.unlabeled, args.labeled_frames, seed,
                                  n_frames=args.frames, H=args.size, W=args.size)
    dataio.write_dataset(out, lab, unl, test)
    manifest.artifacts = {"split": "split.txt", "clips": "clips", "masks": "masks", "flows": "flows"}
    manifest.finish().write(out)
    print(f"wrote {len(lab)} labeled, {len(unl)} unlabeled, {len(test)} test clips to {out}")


def cmd_finetune(args):
    cfg = _ablation(resolve_config(args), args.ablate)
    labeled, _, _ = load_data(args.data)
    if not labeled:
        raise CliError("dataset has no labeled clips")
    out = prepare_out(args)
    manifest = dataio.RunManifest("finetune", cfg.config_hash(), cfg.seed, config=cfg.to_flat())
    logger = JsonlLog(os.path.join(out, LOG_NAME))
    try:
        teacher = finetune_teacher(build_teacher(cfg, "TPT" not in cfg.ablation), labeled, cfg, logger)
    finally:
        logger.close()
    save_checkpoint(os.path.join(out, "teacher.ckpt"), teacher, cfg,
                    cfg.teacher_iterations if cfg.teacher_iterations is not None else cfg.iterations)
    manifest.artifacts = {"checkpoint": "teacher.ckpt", "log": LOG_NAME}
    manifest.finish().write(out)
    print(f"teacher checkpoint written to {os.path.join(out, 'teacher.ckpt')}")


def _flow_provider(kind, data):
    kind = FlowKind(kind)
    if kind == FlowKind.PRECOMPUTED_FILE:
        return FlowProvider(kind, directory=os.path.join(data, "flows"))
    return FlowProvider(kind)


def cmd_train(args):
    cfg = _ablation(resolve_config(args), args.ablate)
    if args.flow:
        cfg = cfg.replace(flow_kind=FlowKind(args.flow))
    teacher, _, _, _ = load_ckpt(args.teacher, "teacher")
    if not teacher.frozen:
        raise CliError("teacher checkpoint is not a fine-tuned (frozen) teacher")
    want_point = "TPT" not in cfg.ablation
    if want_point != (teacher.prompt.kind == PromptKind.POINT):
        raise CliError("teacher prompt mode does not match the TPT setting; "
                       "fine-tune it with the same --ablate tpt choice")
    resume, student = None, build_student(cfg)
    if args.resume:
        student, rcfg, _, resume = load_ckpt(args.resume, "resume")
        if resume is None:
            raise CliError("resume checkpoint holds no optimizer state")
        if rcfg is not None and rcfg.config_hash() != cfg.config_hash():
            raise CliError("resume checkpoint was written with a different config")
    labeled, unlabeled, _ = load_data(args.data)
    out = prepare_out(args)
    manifest = dataio.RunManifest("train", cfg.config_hash(), cfg.seed, config=cfg.to_flat())
    logger = JsonlLog(os.path.join(out, LOG_NAME))
    final = {}
    try:
        train_student(teacher, student, labeled, unlabeled, _flow_provider(cfg.flow_kind, args.data), cfg,
                      log_fn=logger, resume=resume,
                      on_checkpoint=lambda m, st: final.update(state=st))
    finally:
        logger.close()
    save_checkpoint(os.path.join(out, "student.ckpt"), student, cfg, train_state=final.get("state"))
    manifest.artifacts = {"checkpoint": "student.ckpt", "log": LOG_NAME}
    manifest.finish().write(out)
    print(f"student checkpoint written to {os.path.join(out, 'student.ckpt')}")


def cmd_evaluate(args):
    model, _, _, _ = load_ckpt(args.checkpoint, "model")
    _, _, test = load_data(args.data)
    if not test:
        raise CliError("dataset has no test clips")
    missing = [c.clip_id for c in test if not c.has_masks]
    if missing:
        raise CliError(f"test clips without masks: {', '.join(missing)}")
    out = prepare_out(args)
    seed = model.seed if args.seed is None else args.seed
    manifest = dataio.RunManifest("evaluate", dataio.hash_mapping({
        "checkpoint_sha256": _file_sha(args.checkpoint), "threshold": args.threshold, "tau": args.tau}), seed)
    reports = evaluate_clips(model, test, args.threshold, args.tau)
    with open(os.path.join(out, "metrics.csv"), "w") as fh:
        fh.write(reports_to_csv(reports))
    manifest.artifacts = {"metrics": "metrics.csv"}
    if args.plot:
        from . import plots

        pdir = os.path.join(out, "plots")
        os.makedirs(pdir)
        for clip in test:
            preds = predict_masks(model, clip, args.threshold)
            plots.overlay_clip(clip, preds, pdir)
        manifest.artifacts["plots"] = "plots"
        if args.log:
            if not os.path.exists(args.log):
                raise CliError(f"training log not found: {args.log}")
            plots.loss_curve(args.log, os.path.join(out, "loss_curve.png"))
            manifest.artifacts["loss_curve"] = "loss_curve.png"
    manifest.finish().write(out)
    s = summarize(reports)
    print("mean " + " ".join(f"{k}={v:.4f}" for k, v in s.as_dict().items()))


def cmd_ablate(args):
    cfg = resolve_config(args)
    data = load_data(args.data)
    out = prepare_out(args)
    manifest = dataio.RunManifest("ablate", cfg.config_hash(), cfg.seed, config=cfg.to_flat())
    res = run_ablation_suite(cfg, data, _flow_provider(cfg.flow_kind, args.data))
    with open(os.path.join(out, "table2.csv"), "w") as fh:
        fh.write(table2_csv(res["table2"]))
    with open(os.path.join(out, "table3.csv"), "w") as fh:
        fh.write(table3_csv(res["table3"]))
    manifest.artifacts = {"table2": "table2.csv", "table3": "table3.csv"}
    manifest.finish().write(out)
    failed = [r for r in res["table2"] + res["table3"] if r["error"]]
    print(f"ablation tables written to {out} ({len(failed)} failed rows)")


def _file_sha(path):
    import hashlib

    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", default=None, help="flat 'key = value' config file")
    common.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    common.add_argument("--out", default=None, help="output directory (alternative to positional OUT)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="smartseg", description="Semi-supervised vessel segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--labeled", type=int, default=16)
    g.add_argument("--unlabeled", type=int, default=95)
    g.add_argument("--labeled-frames", type=int, choices=(1, 2), default=1)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("out_pos", nargs="?", metavar="OUT")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("finetune", parents=[common], help="stage 1: fine-tune the teacher")
    f.add_argument("--ablate", action="append", default=[], choices=("tpt",),
                   help="tpt: use a point-prompt teacher instead of the concept prompt")
    f.add_argument("data")
    f.add_argument("out_pos", nargs="?", metavar="OUT")
    f.set_defaults(func=cmd_finetune)

    t = sub.add_parser("train", parents=[common], help="stage 2: train the student")
    t.add_argument("--teacher", required=True, help="stage-1 teacher checkpoint")
    t.add_argument("--ablate", action="append", default=[], choices=("ccr", "dstc", "tpt"))
    t.add_argument("--flow", choices=[k.value for k in FlowKind], default=None)
    t.add_argument("--resume", default=None, help="student checkpoint to continue from")
    t.add_argument("data")
    t.add_argument("out_pos", nargs="?", metavar="OUT")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--tau", type=float, default=2.0, help="surface tolerance in pixels")
    e.add_argument("--plot", action="store_true", help="write overlay images (and a loss curve with --log)")
    e.add_argument("--log", default=None, help="training log for the loss-curve plot")
    e.add_argument("data")
    e.add_argument("out_pos", nargs="?", metavar="OUT")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", parents=[common], help="component toggles and perturbation-count sweep")
    a.add_argument("data")
    a.add_argument("out_pos", nargs="?", metavar="OUT")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.time()
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1f s", args.command, time.time() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""``liso`` command line: synth, cluster, track, smooth, selftrain, eval, pipeline.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import kernels
from .cluster import cluster_sequence
from .config import ConfigError, PipelineConfig, dump_config, load_config
from .evaluation import (evaluate, format_report, precision_recall, split_moving_still,
                         write_pr_curve)
from .io import (BoxRecord, FormatError, box_file_coords, group_by_frame, load_manifest, read_boxes,
                 read_speeds, write_boxes)
from .selftrain import (MockDetector, PseudoGT, RoundLog, SelfTrainState, SequenceData, SubprocessDetector,
                        build_pseudo_gt, load_sequences, pseudo_gt_from_records, self_train)
from .synthworld import generate, load_world_spec, random_world
from .tracker import INITIAL, REGENERATION, records_to_tracks, run_tracker, tracks_to_records
from .trackopt import optimize_tracks

log = logging.getLogger("liso")


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage} failed: {exc}")
        self.stage = stage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def metrics(stage: str, **fields) -> None:
    log.info("metrics stage=%s %s", stage, " ".join(f"{k}={v}" for k, v in fields.items()))


def _map(cfg: PipelineConfig, fn, items):
    if cfg.run.workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(cfg.run.workers) as pool:
        return list(pool.map(fn, items))


# --- stages (shared by the subcommands and the pipeline) --------------------


def stage_cluster(seq: SequenceData, cfg: PipelineConfig) -> list[BoxRecord]:
    t0 = time.perf_counter()
    boxes = cluster_sequence(seq.frames, cfg.cluster, seq.frame_interval_s)
    recs = [BoxRecord(t, b) for t in sorted(boxes) for b in boxes[t]]
    metrics("cluster", seq=seq.seq_id, boxes=len(recs), seconds=f"{time.perf_counter() - t0:.3f}")
    return recs


def stage_track(seq: SequenceData, detections: list[BoxRecord], cfg: PipelineConfig, mode=INITIAL):
    t0 = time.perf_counter()
    by_frame = {t: [r.box for r in rs] for t, rs in group_by_frame(detections).items()}
    tracks = run_tracker(seq.frames, by_frame, cfg.tracker, mode, seq.poses)
    metrics("track", seq=seq.seq_id, tracks=len(tracks), seconds=f"{time.perf_counter() - t0:.3f}")
    return tracks


def stage_smooth(seq: SequenceData, tracks, cfg: PipelineConfig):
    t0 = time.perf_counter()
    out = optimize_tracks(tracks, cfg.smooth, seq.frame_interval_s)
    metrics("smooth", seq=seq.seq_id, tracks=len(out), seconds=f"{time.perf_counter() - t0:.3f}")
    return out


def make_detector(cfg: PipelineConfig, workdir: Path):
    if cfg.run.detector == "mock":
        m = cfg.mock
        return MockDetector(m.size_tolerance, m.density_log_sigma, m.min_confidence,
                            augment_params=cfg.augment)
    return SubprocessDetector(cfg.run.detector[len("subprocess:"):], workdir)


def _write_round(out: Path, state: SelfTrainState) -> None:
    for sid, recs in state.database.records.items():
        d = out / sid
        d.mkdir(parents=True, exist_ok=True)
        write_boxes(recs, d / f"pseudo_gt_r{state.round_index}.txt")
    metrics("selftrain", round=state.round_index, boxes=state.database.num_boxes())


def run_selftrain(seqs: dict, initial: PseudoGT, cfg: PipelineConfig, out: Path) -> list[SelfTrainState]:
    state = SelfTrainState(0, initial, None, [RoundLog(0, initial.num_boxes(), 0, False)])
    detector = make_detector(cfg, out / "_detector")
    return self_train(state, cfg.selftrain, detector, seqs, cfg.tracker, cfg.smooth,
                      cfg.run.nms_threshold, cfg.run.seed, on_round=lambda s: _write_round(out, s))


def _load_gt(seq: SequenceData):
    if seq.root is None or not (seq.root / "gt_boxes.txt").exists():
        return None, None
    gts = group_by_frame(read_boxes(seq.root / "gt_boxes.txt"))
    sp = seq.root / "gt_speeds.txt"
    return gts, (read_speeds(sp) if sp.exists() else None)


def quality_lines(states, seqs: dict, cfg: PipelineConfig) -> list[str]:
    """Per-round pseudo-GT precision/recall (BEV IoU 0.4) against any available ground truth."""
    lines = ["round seq split precision recall tp num_pred num_gt"]
    for st in states:
        for sid in sorted(seqs):
            gts, speeds = _load_gt(seqs[sid])
            if gts is None:
                continue
            split = split_moving_still(gts, speeds, cfg.eval.moving_threshold)
            preds = st.database.labels.get(sid, {})
            other = {"movable": None, "moving": split.still, "still": split.moving}
            for name in ("movable", "moving", "still"):
                pool = getattr(split, name)
                if pool is None:
                    continue
                # boxes on the other split's objects are neither hits nor false positives
                s = precision_recall(preds, pool, 0.4, ignore=other[name])
                lines.append(f"{st.round_index} {sid} {name} {s.precision:.6f} {s.recall:.6f} "
                             f"{s.tp} {s.num_pred} {s.num_gt}")
    return lines


# --- subcommands --------------------------------------------------------------


def cmd_synth(args, cfg):
    if args.spec:
        spec = load_world_spec(args.spec)
    else:
        spec = random_world(cfg.run.seed, n_moving=args.n_moving, n_static=args.n_static,
                            frame_count=args.frames)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for k in range(args.count):
        if k:
            spec = random_world(cfg.run.seed + k, n_moving=args.n_moving, n_static=args.n_static,
                                frame_count=args.frames)
        sid = f"{args.seq_id}{k:03d}" if args.count > 1 else args.seq_id
        out = Path(args.out) / sid if args.count > 1 else Path(args.out)
        generate(spec, out, sid)
        metrics("synth", seq=sid, frames=spec.frame_count, actors=len(spec.actors))


def cmd_cluster(args, cfg):
    seq = SequenceData.load(args.seq)
    write_boxes(stage_cluster(seq, cfg), args.out)


def cmd_track(args, cfg):
    seq = SequenceData.load(args.seq)
    if box_file_coords(args.dets) != "ego":
        raise FormatError(f"{args.dets}: detections must be in ego coordinates")
    tracks = stage_track(seq, read_boxes(args.dets), cfg, args.mode)
    write_boxes(tracks_to_records(tracks), args.out, coords="world")


def cmd_smooth(args, cfg):
    if args.seq:
        dt = load_manifest(args.seq).frame_interval_s
    elif args.dt > 0:
        dt = args.dt
    else:
        raise ConfigError("--dt must be positive")
    if box_file_coords(args.tracks) != "world":
        raise FormatError(f"{args.tracks}: tracks must be in world coordinates")
    seq = SequenceData("tracks", [], dt, poses=[])
    tracks = stage_smooth(seq, records_to_tracks(read_boxes(args.tracks)), cfg)
    write_boxes(tracks_to_records(tracks), args.out, coords="world")


def _initial_database(seqs, cfg, out: Path, write: bool = True) -> PseudoGT:
    def one(sid):
        seq = seqs[sid]
        try:
            dets = stage_cluster(seq, cfg)
        except Exception as exc:
            raise StageError("cluster", exc) from exc
        try:
            tracks = stage_track(seq, dets, cfg, INITIAL)
        except Exception as exc:
            raise StageError("track", exc) from exc
        try:
            smoothed = stage_smooth(seq, tracks, cfg)
        except Exception as exc:
            raise StageError("smooth", exc) from exc
        if write:
            d = out / sid
            d.mkdir(parents=True, exist_ok=True)
            write_boxes(dets, d / "detections.txt")
            write_boxes(tracks_to_records(tracks), d / "tracks.txt", coords="world")
            write_boxes(tracks_to_records(smoothed), d / "smoothed.txt", coords="world")
        return sid, smoothed

    smoothed = dict(_map(cfg, one, sorted(seqs)))
    db = build_pseudo_gt(smoothed, seqs)
    if write:
        for sid in sorted(seqs):
            write_boxes(db.records.get(sid, []), out / sid / "pseudo_gt_r0.txt")
    return db


def cmd_selftrain(args, cfg):
    seqs = load_sequences(args.seqs)
    if not seqs:
        raise FormatError(f"no sequences under {args.seqs}")
    out = Path(args.out)
    if args.init:
        recs = {sid: read_boxes(Path(args.init) / sid / "pseudo_gt_r0.txt") for sid in seqs}
        initial = pseudo_gt_from_records(recs, seqs)
    else:
        initial = _initial_database(seqs, cfg, out)
    states = run_selftrain(seqs, initial, cfg, out)
    (out / "selftrain_report.txt").write_text("\n".join(quality_lines(states, seqs, cfg)) + "\n")


def _parse_region(text: str):
    if text.lower() == "none":
        return None
    try:
        x, y = (float(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"region must look like 100x100, got {text!r}") from None
    return (x, y)


def cmd_eval(args, cfg):
    ec = cfg.eval
    if args.iou_space:
        ec.iou_space = args.iou_space
    if args.thresholds:
        ec.iou_thresholds = tuple(float(t) for t in args.thresholds.split(","))
    if args.min_pr_clip is not None:
        ec.min_pr_clip = args.min_pr_clip
    if args.region:
        ec.region = _parse_region(args.region)
    ec.validate()
    gts = group_by_frame(read_boxes(args.gt))
    preds = {t: [r.box for r in rs] for t, rs in group_by_frame(read_boxes(args.pred)).items()}
    results = evaluate(preds, {t: [r.box for r in rs] for t, rs in gts.items()}, ec)
    report = format_report(results, "movable")
    if args.speeds:
        split = split_moving_still(gts, read_speeds(args.speeds), ec.moving_threshold)
        for name in ("moving", "still"):
            if getattr(split, name) is not None:
                report += format_report(evaluate(preds, getattr(split, name), ec), name)
    if args.report:
        Path(args.report).write_text(report)
    else:
        sys.stdout.write(report)
    if args.pr_curve:
        write_pr_curve(results, args.pr_curve)


def cmd_pipeline(args, cfg):
    seqs_root = args.seqs or cfg.run.input_root
    out_root = args.out or cfg.run.output_root
    if not seqs_root or not out_root:
        raise ConfigError("pipeline needs --seqs/--out or run.input_root/run.output_root")
    if args.rounds is not None:
        cfg.selftrain.total_rounds = args.rounds
        cfg.validate()
    seqs = load_sequences(seqs_root)
    if not seqs:
        raise FormatError(f"no sequences under {seqs_root}")
    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    db = _initial_database(seqs, cfg, out)
    try:
        states = run_selftrain(seqs, db, cfg, out)
    except Exception as exc:
        raise StageError("selftrain", exc) from exc
    if len(states) < cfg.selftrain.total_rounds + 1:
        raise StageError("selftrain", RuntimeError(f"aborted after round {states[-1].round_index}"))
    try:
        lines = quality_lines(states, seqs, cfg)
        final = states[-1].database
        report = "\n".join(lines) + "\n"
        for sid in sorted(seqs):
            gts, _ = _load_gt(seqs[sid])
            if gts is not None:
                res = evaluate(final.labels.get(sid, {}), {t: [r.box for r in rs] for t, rs in gts.items()},
                               cfg.eval)
                report += format_report(res, f"{sid} round {states[-1].round_index}")
        (out / "report.txt").write_text(report)
    except Exception as exc:
        raise StageError("eval", exc) from exc
    metrics("pipeline", sequences=len(seqs), rounds=states[-1].round_index)


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = _Parser(prog="liso", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic sequences")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="world spec file; random world when omitted")
    p.add_argument("--seq-id", default="synth")
    p.add_argument("--count", type=int, default=1, help="number of random worlds")
    p.add_argument("--n-moving", type=int, default=3)
    p.add_argument("--n-static", type=int, default=2)
    p.add_argument("--frames", type=int, default=50)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cluster", parents=[common], help="flow clustering into ego-frame boxes")
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eps", type=float, help="DBSCAN radius (cluster.dbscan_eps)")
    p.add_argument("--min-pts", type=int, help="DBSCAN core size (cluster.dbscan_min_pts)")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("track", parents=[common], help="track detections into world-frame tracks")
    p.add_argument("--seq", required=True)
    p.add_argument("--boxes", "--dets", dest="dets", required=True, help="ego-frame candidate boxes")
    p.add_argument("--match-max-dist", type=float, help="tracker.match_max_dist")
    p.add_argument("--min-track-len", type=int, help="tracker.min_track_len")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=[INITIAL, REGENERATION], default=INITIAL)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("smooth", parents=[common], help="jerk smoothing, heading alignment, size voting")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--seq", help="sequence dir (frame interval from its manifest)")
    g.add_argument("--dt", type=float, help="frame interval in seconds")
    p.add_argument("--beta", type=float, help="smooth.beta")
    p.add_argument("--tracks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("selftrain", parents=[common], help="self-training rounds")
    p.add_argument("--seqs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="directory with <seq>/pseudo_gt_r0.txt; computed when omitted")
    p.add_argument("--rounds", type=int)
    p.add_argument("--steps-per-round", type=int)
    p.add_argument("--weight-drop-every", type=int)
    p.add_argument("--detector", help="mock or subprocess:<command>")
    p.set_defaults(func=cmd_selftrain)

    p = sub.add_parser("eval", parents=[common], help="AP / AOE / PR curve")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--speeds", help="gt_speeds.txt for the moving/still split")
    p.add_argument("--iou-space", choices=["bev", "3d"])
    p.add_argument("--thresholds", help="comma separated, e.g. 0.3,0.5")
    p.add_argument("--min-pr-clip", type=float)
    p.add_argument("--region", help="e.g. 100x100, or none")
    p.add_argument("--report")
    p.add_argument("--pr-curve")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common], help="cluster, track, smooth, selftrain, eval")
    p.add_argument("--seqs")
    p.add_argument("--out")
    p.add_argument("--rounds", type=int)
    p.set_defaults(func=cmd_pipeline)
    return ap


def _config_from_args(args) -> PipelineConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    flags = {"cluster": (("eps", "cluster.dbscan_eps"), ("min_pts", "cluster.dbscan_min_pts")),
             "track": (("match_max_dist", "tracker.match_max_dist"), ("min_track_len", "tracker.min_track_len")),
             "smooth": (("beta", "smooth.beta"),)}
    for flag, key in flags.get(args.command, ()):
        if getattr(args, flag) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    if args.command == "selftrain":
        for flag, key in (("rounds", "selftrain.total_rounds"), ("steps_per_round", "selftrain.steps_per_round"),
                          ("weight_drop_every", "selftrain.rounds_per_weight_drop"), ("detector", "run.detector")):
            if getattr(args, flag) is not None:
                overrides.append(f"{key}={getattr(args, flag)}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.debug("kernel backend: %s", kernels.BACKEND)
    try:
        cfg = _config_from_args(args)
        args.func(args, cfg)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"liso: invalid input: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"liso: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"liso: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Reference external detector: the mock detector behind the subprocess contract.

Usage mirrors what :class:`liso.selftrain.SubprocessDetector` invokes::

    python -m liso.detector_stub train --workdir W --sequences LIST --steps S --seed N \
        --weights-in PATH|fresh --weights-out PATH
    python -m liso.detector_stub infer --seq DIR --weights PATH --out detections.txt

Set ``LISO_STUB_FAIL=train`` or ``infer`` to make that command exit non-zero.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .io import BoxRecord, read_boxes, write_boxes
from .selftrain import (MockDetector, SequenceData, load_mock_weights, pseudo_gt_from_records,
                        save_mock_weights)


def _train(args) -> int:
    seqs = {}
    for line in Path(args.sequences).read_text().splitlines():
        if line.strip():
            s = SequenceData.load(line.strip())
            seqs[s.seq_id] = s
    records = {sid: read_boxes(Path(args.workdir) / "pseudo_gt" / f"{sid}.txt") for sid in seqs}
    db = pseudo_gt_from_records(records, seqs)
    weights = None if args.weights_in == "fresh" else load_mock_weights(args.weights_in)
    w = MockDetector().train(db, seqs, args.steps, weights, seed=args.seed)
    save_mock_weights(w, args.weights_out)
    return 0


def _infer(args) -> int:
    seq = SequenceData.load(args.seq)
    w = load_mock_weights(args.weights)
    det = MockDetector()
    recs = [BoxRecord(f.timestamp_index, b) for f in seq.frames for b in det.infer(f.appearance_view(), w)]
    write_boxes(recs, args.out)
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="liso-detector-stub")
    sub = ap.add_subparsers(dest="cmd", required=True)
    t = sub.add_parser("train")
    t.add_argument("--workdir", required=True)
    t.add_argument("--sequences", required=True)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--weights-in", required=True)
    t.add_argument("--weights-out", required=True)
    i = sub.add_parser("infer")
    i.add_argument("--seq", required=True)
    i.add_argument("--weights", required=True)
    i.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    if os.environ.get("LISO_STUB_FAIL") == args.cmd:
        print(f"{args.cmd} failed on request", file=sys.stderr)
        return 3
    return _train(args) if args.cmd == "train" else _infer(args)


if __name__ == "__main__":
    sys.exit(main())

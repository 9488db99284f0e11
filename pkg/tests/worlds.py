"""Shared fixtures for tests that need whole synthetic worlds in memory."""
from liso.evaluation import precision_recall, split_moving_still
from liso.selftrain import SequenceData
from liso.synthworld import random_world, simulate


def make_sequences(seeds, **kw):
    seqs, worlds = {}, {}
    for s in seeds:
        w = simulate(random_world(s, **kw))
        sid = f"w{s:04d}"
        seqs[sid] = SequenceData(sid, w.frames, w.spec.frame_interval_s)
        worlds[sid] = w
    return seqs, worlds


def split_quality(labels_by_seq, worlds, thr=0.4):
    """Pooled (tp, num_pred, num_gt) per split; boxes on the other split are ignored."""
    tot = {k: [0, 0, 0] for k in ("movable", "moving", "still")}
    for sid, w in worlds.items():
        split = split_moving_still(w.boxes_by_frame(), w.speeds)
        preds = labels_by_seq.get(sid, {})
        other = {"movable": None, "moving": split.still, "still": split.moving}
        for name in tot:
            s = precision_recall(preds, getattr(split, name), thr, ignore=other[name])
            tot[name][0] += s.tp
            tot[name][1] += s.num_pred
            tot[name][2] += s.num_gt
    return {k: (tp / npred if npred else 1.0, tp / ngt if ngt else 1.0) for k, (tp, npred, ngt) in tot.items()}

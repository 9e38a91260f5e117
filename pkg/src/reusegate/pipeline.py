"""Stateful per-object video inference: gate decision, route dispatch, state
update, online score-head refresh, multi-object merging, FLOP records.

Per-object state holds the frame-0 template plus the score map and refined
feature produced by the most recent full-route frame; reuse frames edit that
state without replacing it, copy frames return the previous mask outright.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flops as F
from . import metrics as M
from . import tensor as T
from .flops import COPY, FULL, REUSE
from .network import init_score_from_mask, mask_to_fraction
from .tensor import Tensor

MODES = ("dynamic", "always_full", "copy", "fusion")


@dataclass
class GateConfig:
    """Threshold configuration for the per-frame route decision."""

    tau: float
    tau2: float | None = None
    mode: str = "dynamic"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown gate mode {self.mode!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.mode == "fusion":
            if self.tau2 is None:
                raise ValueError("fusion mode needs tau2")
            if not self.tau <= self.tau2 <= 1.0:
                raise ValueError("fusion needs tau <= tau2 <= 1")


def decide(p_gate, cfg):
    """Map a gate probability to a route; reuse engages at p_gate >= tau."""
    if not 0.0 < p_gate < 1.0:
        raise ValueError(f"gate probability must lie strictly in (0, 1), got {p_gate}")
    if cfg.mode == "always_full":
        return FULL
    if cfg.mode == "dynamic":
        return REUSE if p_gate >= cfg.tau else FULL
    if cfg.mode == "copy":
        return COPY if p_gate >= cfg.tau else FULL
    # fusion: copy on extreme similarity, reuse on moderate, full otherwise
    if p_gate >= cfg.tau2:
        return COPY
    return REUSE if p_gate >= cfg.tau else FULL


@dataclass
class DecisionRecord:
    frame: int
    object_id: int
    p_gate: float
    decision: str
    flops: int

    def to_json(self):
        return {
            "frame": self.frame,
            "object": self.object_id,
            "p_gate": self.p_gate,
            "decision": self.decision,
            "flops": self.flops,
        }


@dataclass
class ObjectState:
    """Mutable per-object inference state."""

    object_id: int
    template: np.ndarray
    s_prev: np.ndarray
    r8_prev: np.ndarray
    last_mask: np.ndarray
    frames_since_full: int = 0
    full_frames_seen: int = 1
    history: list = field(default_factory=list)  # (f16 data, mask fraction target)


@dataclass
class InferenceConfig:
    """Inference-time knobs around the gate thresholds."""

    gate: GateConfig
    ft_steps: int = 32
    ft_lr: float = 1e-2
    refresh: bool = True
    refresh_every: int = 8
    refresh_steps: int = 5
    history_cap: int = 8


def _as_frame_tensor(frame):
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"frames are (3, h, w); got shape {np.asarray(frame).shape}")
    return Tensor(arr)


def fine_tune_score_head(model, f16, target_fraction, steps, lr):
    """Adapt the score head to one frame by minimizing mask BCE."""
    target = Tensor(target_fraction)
    params = model.score_parameters()
    for _ in range(steps):
        T.zero_grads(params)
        with T.Tape():
            logits = model.score_generate(f16)
            loss = T.bce_with_logits(logits, target)
            T.backward(loss)
        T.adam_step(params, lr)


def init_video(model, frame0, mask0, fine_tune_steps=0, ft_lr=1e-2, object_id=1):
    """Build per-object state from the given first frame and its mask.

    Optionally fine-tunes the score head on frame 0 so the coarse score map
    becomes target-specific, then runs one full route to populate the stored
    score map and refined feature.
    """
    mask0 = np.asarray(mask0).astype(bool)
    x = _as_frame_tensor(frame0)
    _, _, h, w = x.shape
    if mask0.shape != (h, w):
        raise ValueError(f"mask dims {mask0.shape} do not match frame {h}x{w}")
    if h % 32 or w % 32:
        raise ValueError(f"frame dims {h}x{w} must be divisible by 32")

    with T.pause_tape():
        f4, f8 = model.stem_forward(x)
        s0 = init_score_from_mask(mask0)
        template = model.build_template(f8, s0)
        f16, f32 = model.deep_forward(f8)

    if fine_tune_steps > 0:
        fine_tune_score_head(
            model, f16.detach(), mask_to_fraction(mask0), fine_tune_steps, ft_lr
        )

    with T.pause_tape():
        score = model.score_generate(f16)
        _, r8 = model.decode_full(f32, f16, f8, f4, score)

    return ObjectState(
        object_id=object_id,
        template=template.data,
        s_prev=score.data,
        r8_prev=r8.data,
        last_mask=mask0.copy(),
        frames_since_full=0,
        full_frames_seen=1,
        history=[(f16.data, mask_to_fraction(mask0))],
    )


def refresh_score_generator(model, state, steps=5, lr=1e-2):
    """Refit the score head's second layer to stored pseudo-label pairs."""
    if not state.history or steps <= 0:
        return
    with T.pause_tape():
        hidden = [
            T.relu(model.score_c1(Tensor(f16))).data for f16, _ in state.history
        ]
    targets = [Tensor(frac) for _, frac in state.history]
    params = model.score_second_layer_parameters()
    inv = 1.0 / len(hidden)
    for _ in range(steps):
        T.zero_grads(params)
        with T.Tape():
            total = None
            for hid, tgt in zip(hidden, targets):
                logits = T.upsample_bilinear2x(model.score_c2(Tensor(hid)))
                term = T.bce_with_logits(logits, tgt)
                total = term if total is None else total + term
            T.backward(total * inv)
        T.adam_step(params, lr)


def step(model, state, frame, frame_index, icfg, flops_by_path=None):
    """Advance one frame; returns (mask, decision record, mask logits or None).

    The stored score map and refined feature change only when the decision is
    full; copy frames run nothing past the gate chain.
    """
    x = _as_frame_tensor(frame)
    _, _, h, w = x.shape
    if flops_by_path is None:
        flops_by_path = F.frame_flops(model.cfg, (h, w))

    with T.pause_tape():
        f4, f8 = model.stem_forward(x)
        d_t = model.match_dissimilarity(f8, Tensor(state.s_prev), Tensor(state.template))
        p_gate = model.gate_probability(d_t).item()
        decision = decide(p_gate, icfg.gate)

        logits = None
        if decision == FULL:
            f16, f32 = model.deep_forward(f8)
            score = model.score_generate(f16)
            out, r8 = model.decode_full(f32, f16, f8, f4, score)
            logits = out.data[0, 0]
            mask = logits >= 0.0
            state.s_prev = score.data
            state.r8_prev = r8.data
            state.frames_since_full = 0
            state.full_frames_seen += 1
            state.history.append((f16.data, mask_to_fraction(mask)))
            del state.history[: -icfg.history_cap]
        elif decision == REUSE:
            delta = model.generate_delta(d_t)
            s_hat = Tensor(state.s_prev) + delta
            r8_hat = model.refine_translate(Tensor(state.r8_prev), delta)
            out = model.decode_reuse(r8_hat, f8, f4, s_hat)
            logits = out.data[0, 0]
            mask = logits >= 0.0
            state.frames_since_full += 1
        else:
            mask = state.last_mask.copy()
            state.frames_since_full += 1

    if (
        decision == FULL
        and icfg.refresh
        and state.full_frames_seen % icfg.refresh_every == 0
    ):
        refresh_score_generator(model, state, icfg.refresh_steps, icfg.ft_lr)

    state.last_mask = mask
    record = DecisionRecord(frame_index, state.object_id, p_gate, decision, flops_by_path[decision])
    return mask, record, logits


def merge_objects(per_object_logits):
    """Fuse per-object mask logits into one integer label map.

    Background has logit 0 and loses ties; among objects, the lower id wins.
    """
    if not per_object_logits:
        raise ValueError("merge_objects needs at least one object")
    shape = per_object_logits[0].shape
    for lg in per_object_logits:
        if lg.shape != shape:
            raise ValueError("merge_objects: mismatched logit dimensions")
    stack = np.stack(list(per_object_logits) + [np.zeros(shape)])
    best = stack.argmax(axis=0)  # first max wins: object order, then background
    labels = np.where(best == len(per_object_logits), 0, best + 1)
    return labels.astype(np.int32)


def reuse_rate(records):
    """Fraction of frames whose mask generation was skipped (reuse or copy)."""
    if not records:
        raise ValueError("reuse_rate of an empty record list")
    return sum(1 for r in records if r.decision != FULL) / len(records)


def object_ids_from_mask(mask0):
    ids = sorted(int(v) for v in np.unique(mask0) if v > 0)
    if not ids:
        raise ValueError("first-frame mask labels no objects")
    if ids != list(range(1, len(ids) + 1)):
        raise ValueError(f"object ids must be contiguous from 1, got {ids}")
    return ids


@dataclass
class VideoRun:
    labels: np.ndarray  # (t, h, w) int labels, frame 0 is the given mask
    records: dict  # object id -> list[DecisionRecord]

    def all_records(self):
        return [r for recs in self.records.values() for r in recs]


def run_video(model, frames, masks, icfg):
    """Segment a whole video given its first-frame object mask.

    Each object runs independently on a cloned model (fine-tuning and the
    online refresh mutate weights), then per-frame logits are merged.
    """
    frames = np.asarray(frames, dtype=np.float64)
    masks = np.asarray(masks)
    n_frames = frames.shape[0]
    ids = object_ids_from_mask(masks[0])
    h, w = masks[0].shape
    flops_by_path = F.frame_flops(model.cfg, (h, w))

    labels = np.zeros((n_frames, h, w), dtype=np.int32)
    labels[0] = masks[0]
    records = {oid: [] for oid in ids}
    per_object = []
    for oid in ids:
        worker = model.clone()
        state = init_video(
            worker, frames[0], masks[0] == oid, icfg.ft_steps, icfg.ft_lr, object_id=oid
        )
        per_object.append((worker, state))

    for t in range(1, n_frames):
        frame_logits = []
        for (worker, state), oid in zip(per_object, ids):
            mask, rec, logits = step(worker, state, frames[t], t, icfg, flops_by_path)
            records[oid].append(rec)
            if logits is None:  # copy frames carry the mask itself
                logits = np.where(mask, 1.0, -1.0)
            frame_logits.append(logits)
        labels[t] = merge_objects(frame_logits)
    return VideoRun(labels=labels, records=records)


def plain_masks(model, frames):
    """Per-frame masks from the gate-free network: stem, deep features,
    score head, full decoder. The reference the always-full mode must match
    bitwise."""
    out = []
    with T.pause_tape():
        for frame in np.asarray(frames, dtype=np.float64):
            x = _as_frame_tensor(frame)
            f4, f8 = model.stem_forward(x)
            f16, f32 = model.deep_forward(f8)
            score = model.score_generate(f16)
            logits, _ = model.decode_full(f32, f16, f8, f4, score)
            out.append(logits.data[0, 0] >= 0.0)
    return np.stack(out)


# ---------------------------------------------------------------------------
# evaluation harness


def evaluate_videos(model, videos, icfg, boundary_tol=None):
    """Run and score a list of (name, frames, masks) videos.

    Returns a report dict: per-video and per-object J, F, J&F, reuse rate,
    FLOP ratio against an all-full run, plus pooled gate/IoU agreement.
    """
    video_reports = []
    pooled_pairs = []  # (p_gate, consecutive gt IoU) over all objects/frames
    all_records = []
    for name, frames, masks in videos:
        run = run_video(model, frames, masks, icfg)
        ids = object_ids_from_mask(masks[0])
        n_eval = frames.shape[0] - 1
        obj_reports = []
        for oid in ids:
            pred = [run.labels[t] == oid for t in range(frames.shape[0])]
            gt = [masks[t] == oid for t in range(frames.shape[0])]
            j = M.jaccard_mean(pred, gt)
            f = float(
                np.mean([M.boundary_f(p, g, tol=boundary_tol) for p, g in zip(pred[1:], gt[1:])])
            )
            recs = run.records[oid]
            for rec, t in zip(recs, range(1, frames.shape[0])):
                pooled_pairs.append((rec.p_gate, M.iou(gt[t - 1], gt[t])))
            obj_reports.append(
                {
                    "object": oid,
                    "J": j,
                    "F": f,
                    "JF": M.jf_mean(j, f),
                    "reuse_rate": reuse_rate(recs),
                }
            )
        recs = run.all_records()
        all_records.extend(recs)
        total = sum(r.flops for r in recs)
        full_total = F.frame_flops(model.cfg, masks[0].shape)[FULL] * len(recs)
        video_reports.append(
            {
                "name": name,
                "frames": int(frames.shape[0]),
                "objects": obj_reports,
                "J": float(np.mean([o["J"] for o in obj_reports])),
                "F": float(np.mean([o["F"] for o in obj_reports])),
                "JF": float(np.mean([o["JF"] for o in obj_reports])),
                "reuse_rate": reuse_rate(recs),
                "flop_ratio": total / full_total,
            }
        )
    aggregate = {
        "J": float(np.mean([v["J"] for v in video_reports])),
        "F": float(np.mean([v["F"] for v in video_reports])),
        "JF": float(np.mean([v["JF"] for v in video_reports])),
        "reuse_rate": float(np.mean([v["reuse_rate"] for v in video_reports])),
        "flop_ratio": float(np.mean([v["flop_ratio"] for v in video_reports])),
        "videos": len(video_reports),
    }
    ps = [p for p, _ in pooled_pairs]
    ious = [i for _, i in pooled_pairs]
    if len(set(ious)) > 1 and len(set(ps)) > 1:
        aggregate["gate_iou_pearson"] = M.pearson(ps, ious)
    return {
        "videos": video_reports,
        "aggregate": aggregate,
        "mode": icfg.gate.mode,
        "tau": icfg.gate.tau,
        "tau2": icfg.gate.tau2,
    }, all_records

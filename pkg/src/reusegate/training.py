"""Offline training: the gate-probability loss with its margin ramp, the
score-delta loss, the pixel BCE, and a sequence loop that picks the route
per frame with the training threshold and detaches stored state between
frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .metrics import iou
from .network import init_score_from_mask, mask_to_fraction, mask_to_logits
from .tensor import Tensor


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch: int = 8
    seq_len: int = 6
    steps: int = 600
    m1_final: float = 1.0
    m2: float = 0.0
    ramp_steps: int | None = None  # defaults to 20% of steps
    tau_train: float = 0.5
    seed: int = 0
    pretrain_frac: float = 0.25  # early phase with the reuse route disabled

    def __post_init__(self):
        if not 0.0 <= self.m2 < 1.0:
            raise ValueError("m2 must lie in [0, 1)")
        if not 0.0 < self.m1_final <= 1.0:
            raise ValueError("m1_final must lie in (0, 1]")
        if self.ramp_steps is not None and self.ramp_steps > self.steps:
            raise ValueError("ramp_steps cannot exceed steps")
        if not 0.0 <= self.pretrain_frac <= 1.0:
            raise ValueError("pretrain_frac must lie in [0, 1]")

    @property
    def resolved_ramp_steps(self):
        if self.ramp_steps is not None:
            return self.ramp_steps
        return max(1, int(0.2 * self.steps))


def margin_at(step, cfg):
    """Lower margin for the gate target: linear ramp from 0 to m1_final."""
    if step < 0:
        raise ValueError("step must be >= 0")
    ramp = cfg.resolved_ramp_steps
    if ramp == 0:
        return cfg.m1_final
    return cfg.m1_final * min(1.0, step / ramp)


def gate_target(gt_prev, gt_cur, m1_current):
    """Target gate probability: the mask IoU, floored by the current margin."""
    return max(m1_current, iou(gt_prev, gt_cur))


def loss_gp(p_gate, p_target, m2):
    """Squared gate-probability error with an m2 dead zone.

    The gradient w.r.t. the gate probability is exactly zero while
    |p_gate - p_target| <= m2.
    """
    diff = T.abs_(p_gate - T.scalar(p_target))
    clamped = T.clamp_min(diff, m2)
    return T.mean_all(T.mul(clamped, clamped))


def loss_delta(delta, y_small, s_prev):
    """Score-edit regression: pull delta toward (downsampled truth - stored map).

    Both of those are constants here; no gradient flows into stored state.
    """
    target = np.asarray(y_small) - np.asarray(s_prev)
    if target.shape != delta.shape:
        raise ValueError(f"loss_delta: shape mismatch {target.shape} vs {delta.shape}")
    return T.l2_mean(delta, Tensor(target))


def loss_total(mask_logits, y_t, p_gate, p_target, m2, delta_terms=None):
    """Unweighted sum: gate loss + optional delta loss + pixel BCE.

    ``delta_terms`` is (delta, y_small, s_prev) on reuse frames, absent on
    full frames. Returns the scalar tensor and the float parts for logging.
    """
    target = Tensor(np.asarray(y_t, dtype=np.float64).reshape(mask_logits.shape))
    bce = T.bce_with_logits(mask_logits, target)
    gp = loss_gp(p_gate, p_target, m2)
    total = gp + bce
    parts = {"loss_gp": gp.item(), "bce": bce.item(), "loss_delta": 0.0}
    if delta_terms is not None:
        ld = loss_delta(*delta_terms)
        total = total + ld
        parts["loss_delta"] = ld.item()
    return total, parts


def downsample_mask(mask):
    """Ground-truth mask in score-map space (clamped logits at 1/8)."""
    return mask_to_logits(mask, factor=8)


# ---------------------------------------------------------------------------
# sequence loop


@dataclass
class StepStats:
    step: int
    loss: float
    loss_gp: float
    loss_delta: float
    bce: float
    mean_p_gate: float
    reuse_fraction: float
    m1_current: float

    def to_json(self):
        return {
            "step": self.step,
            "loss": self.loss,
            "loss_gp": self.loss_gp,
            "loss_delta": self.loss_delta,
            "bce": self.bce,
            "mean_p_gate": self.mean_p_gate,
            "reuse_fraction": self.reuse_fraction,
            "m1_current": self.m1_current,
        }


def _init_sequence_state(model, frame0, mask0):
    """Frame-0 state for training: no per-video fine-tune, nothing taped."""
    with T.pause_tape():
        x = Tensor(frame0[None])
        f4, f8 = model.stem_forward(x)
        s0 = init_score_from_mask(mask0)
        template = model.build_template(f8, s0)
        f16, f32 = model.deep_forward(f8)
        score = model.score_generate(f16)
        _, r8 = model.decode_full(f32, f16, f8, f4, score)
    return template.data, score.data, r8.data


def train_step(model, batch, cfg, step):
    """One optimizer step over a batch of sequences; returns loggable stats.

    Per frame the route follows the gate at the training threshold (full
    route forced during the pre-training phase); the per-frame losses are
    averaged and a single Adam update is applied.
    """
    params = model.parameters()
    T.zero_grads(params)
    pretrain = step < int(cfg.pretrain_frac * cfg.steps)
    m1 = margin_at(step, cfg)

    losses = []
    gp_parts, bce_parts, delta_parts, p_values = [], [], [], []
    n_reuse = 0
    n_frames = 0
    with T.Tape() as tape:
        for frames, masks in batch:
            template, s_prev, r8_prev = _init_sequence_state(model, frames[0], masks[0])
            last_full = 0
            for t in range(1, frames.shape[0]):
                x = Tensor(frames[t][None])
                f4, f8 = model.stem_forward(x)
                d_t = model.match_dissimilarity(f8, Tensor(s_prev), Tensor(template))
                p = model.gate_probability(d_t)
                p_values.append(p.item())
                p_target = gate_target(masks[last_full], masks[t], m1)

                reuse = (not pretrain) and p.item() >= cfg.tau_train
                if reuse:
                    delta = model.generate_delta(d_t)
                    s_hat = Tensor(s_prev) + delta
                    r8_hat = model.refine_translate(Tensor(r8_prev), delta)
                    logits = model.decode_reuse(r8_hat, f8, f4, s_hat)
                    total, parts = loss_total(
                        logits, masks[t][None, None], p, p_target, cfg.m2,
                        delta_terms=(delta, downsample_mask(masks[t]), s_prev),
                    )
                    delta_parts.append(parts["loss_delta"])
                    n_reuse += 1
                else:
                    f16, f32 = model.deep_forward(f8)
                    score = model.score_generate(f16)
                    logits, r8 = model.decode_full(f32, f16, f8, f4, score)
                    total, parts = loss_total(
                        logits, masks[t][None, None], p, p_target, cfg.m2
                    )
                    s_prev = score.data  # stored state detaches from the graph
                    r8_prev = r8.data
                    last_full = t
                losses.append(total)
                gp_parts.append(parts["loss_gp"])
                bce_parts.append(parts["bce"])
                n_frames += 1

        mean_loss = losses[0]
        for term in losses[1:]:
            mean_loss = mean_loss + term
        mean_loss = mean_loss * (1.0 / n_frames)
        loss_value = mean_loss.item()
        if not np.isfinite(loss_value):
            raise NonFiniteLossError(f"non-finite loss at step {step}: {loss_value}")
        T.backward(mean_loss)
    T.adam_step(params, cfg.lr)

    return StepStats(
        step=step,
        loss=loss_value,
        loss_gp=float(np.mean(gp_parts)),
        loss_delta=float(np.mean(delta_parts)) if delta_parts else 0.0,
        bce=float(np.mean(bce_parts)),
        mean_p_gate=float(np.mean(p_values)),
        reuse_fraction=n_reuse / n_frames,
        m1_current=m1,
    )


def make_batch(synth_cfg, cfg, step):
    """Deterministic batch of sequences for one step, derived from the seed."""
    from .synth import synth_sequence

    batch = []
    for i in range(cfg.batch):
        child = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1, step, i))
        frames, masks = synth_sequence(synth_cfg, cfg.seq_len, child)
        batch.append((frames, masks))
    return batch


def train(model, cfg, synth_cfg, log_stream=None, progress_every=0):
    """Full training loop on synthetic sequences; optionally logs JSONL."""
    history = []
    for step in range(cfg.steps):
        stats = train_step(model, make_batch(synth_cfg, cfg, step), cfg, step)
        history.append(stats)
        if log_stream is not None:
            log_stream.write(json.dumps(stats.to_json()) + "\n")
        if progress_every and (step % progress_every == 0 or step == cfg.steps - 1):
            print(
                f"step {step:5d} loss {stats.loss:.4f} bce {stats.bce:.4f} "
                f"p {stats.mean_p_gate:.3f} reuse {stats.reuse_fraction:.2f} "
                f"m1 {stats.m1_current:.2f}",
                flush=True,
            )
    return history

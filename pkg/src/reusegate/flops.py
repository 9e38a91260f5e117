"""Analytic per-layer arithmetic cost of each inference route.

One counting rule everywhere: a convolution costs
``2 * k^2 * c_in * c_out * h_out * w_out`` (multiply-adds plus bias), pooling
and upsampling cost one unit per element (global pooling by the elements it
reduces); cheap pointwise ops are below the ledger's resolution. Every term
is linear in frame area, so doubling both frame dimensions multiplies every
path total by exactly four.

The table below is written out by hand, independently of the network code; a
debug-instrumented forward pass must agree with it to within 0.1%, which is
asserted in the tests.

Stages:
  common        gate chain, runs on every frame whatever the decision
  full          deep features, score head, deep decoder stages
  reuse         delta generator, translator, reuse fusion stage
  decode_shared final decoder stage and mask head (full and reuse, not copy)
"""

from __future__ import annotations

from dataclasses import dataclass

from .network import DEEP_BLOCKS_16, DEEP_BLOCKS_32

FULL = "full"
REUSE = "reuse"
COPY = "copy"

_STAGES_BY_PATH = {
    FULL: ("common", "decode_shared", "full"),
    REUSE: ("common", "decode_shared", "reuse"),
    COPY: ("common",),
}


@dataclass(frozen=True)
class LayerCost:
    name: str
    stage: str
    flops: int


def _conv(c_in, c_out, k, h, w):
    return 2 * k * k * c_in * c_out * h * w


def layer_costs(cfg, frame_hw):
    """Per-layer cost table for one frame of the given size."""
    h, w = frame_hw
    if h % 32 or w % 32:
        raise ValueError(f"frame dims {h}x{w} must be divisible by 32")
    h2, w2 = h // 2, w // 2
    h4, w4 = h // 4, w // 4
    h8, w8 = h // 8, w // 8
    h16, w16 = h // 16, w // 16
    h32, w32 = h // 32, w // 32
    s4, s8 = cfg.stem_channels
    s4h = max(1, s4 // 2)
    d16, d32 = cfg.deep_channels
    cf, cr = cfg.c_f, cfg.c_r
    crh = cr // 2
    gw = cfg.gate_width
    sc = cfg.score_channels

    rows = []

    def add(name, stage, flops):
        rows.append(LayerCost(name, stage, int(flops)))

    # shared stem, matcher, gate: run on every frame
    add("stem.b1c1", "common", _conv(3, s4h, 3, h2, w2))
    add("stem.b1c2", "common", _conv(s4h, s4, 3, h4, w4))
    add("stem.b2c1", "common", _conv(s4, s8, 3, h8, w8))
    add("match.query", "common", _conv(s8 + 1, cf, 1, h8, w8))
    add("match.fuse", "common", _conv(2 * cf, cf, 3, h8, w8))
    add("gate.pool1", "common", cf * h16 * w16)
    add("gate.c1", "common", _conv(cf, gw, 3, h16, w16))
    add("gate.pool2", "common", gw * h32 * w32)
    add("gate.c2", "common", _conv(gw, 1, 3, h32, w32))
    add("gate.gap", "common", h32 * w32)

    # deep feature stages: full route only
    add("deep.d16.down", "full", _conv(s8, d16, 3, h16, w16))
    for i in range(DEEP_BLOCKS_16):
        add(f"deep.d16.res{i + 1}", "full", 2 * _conv(d16, d16, 3, h16, w16))
    add("deep.d32.down", "full", _conv(d16, d32, 3, h32, w32))
    for i in range(DEEP_BLOCKS_32):
        add(f"deep.d32.res{i + 1}", "full", 2 * _conv(d32, d32, 3, h32, w32))

    # score head: full route only
    add("score.c1", "full", _conv(d16, sc, 3, h16, w16))
    add("score.c2", "full", _conv(sc, 1, 3, h16, w16))
    add("score.up", "full", h8 * w8)

    # deep decoder stages: full route only
    add("dec.s16", "full", h16 * w16)  # score resized down for the r16 stage
    add("dec.up_f32", "full", d32 * h16 * w16)
    add(
        "dec.r16",
        "full",
        _conv(d16 + d32 + 1, crh, 3, h16, w16) + _conv(crh, cr, 3, h16, w16),
    )
    add("dec.up_r16", "full", cr * h8 * w8)
    add(
        "dec.r8",
        "full",
        _conv(s8 + cr + 1, crh, 3, h8, w8) + _conv(crh, cr, 3, h8, w8),
    )

    # reuse route: score edit, translator, fusion stage
    add("delta.conv", "reuse", _conv(cf, 1, 3, h8, w8))
    for name in ("trans.b1", "trans.b2", "trans.b3"):
        add(name, "reuse", _conv(cr + 1, crh, 3, h8, w8))
    add("trans.merge", "reuse", _conv(3 * crh, cr, 1, h8, w8))
    add(
        "trans.res",
        "reuse",
        _conv(cr, crh, 3, h8, w8) + _conv(crh, cr, 3, h8, w8),
    )
    add(
        "dec.r8p",
        "reuse",
        _conv(s8 + cr + 1, crh, 3, h8, w8) + _conv(crh, cr, 3, h8, w8),
    )

    # final decoder stage and head: shared by full and reuse
    add("dec.s4", "decode_shared", h4 * w4)  # score resized up for the r4 stage
    add("dec.up_r8", "decode_shared", cr * h4 * w4)
    add(
        "dec.r4",
        "decode_shared",
        _conv(s4 + cr + 1, crh, 3, h4, w4) + _conv(crh, cr, 3, h4, w4),
    )
    add("dec.head", "decode_shared", _conv(cr, 1, 1, h4, w4))
    add("dec.up2a", "decode_shared", h2 * w2)
    add("dec.up2b", "decode_shared", h * w)
    return rows


def count_flops(path, cfg, frame_hw):
    """Total arithmetic over exactly the layers executed on ``path``."""
    if path not in _STAGES_BY_PATH:
        raise ValueError(f"unknown path {path!r}")
    stages = _STAGES_BY_PATH[path]
    return sum(row.flops for row in layer_costs(cfg, frame_hw) if row.stage in stages)


def frame_flops(cfg, frame_hw):
    """Per-path totals for one frame: {'full': n, 'reuse': n, 'copy': n}."""
    rows = layer_costs(cfg, frame_hw)
    by_stage = {}
    for row in rows:
        by_stage[row.stage] = by_stage.get(row.stage, 0) + row.flops
    return {
        path: sum(by_stage.get(s, 0) for s in stages)
        for path, stages in _STAGES_BY_PATH.items()
    }


def path_layers(path, cfg, frame_hw):
    """Rows of the table executed on ``path`` (for the per-layer report)."""
    stages = _STAGES_BY_PATH[path]
    return [row for row in layer_costs(cfg, frame_hw) if row.stage in stages]

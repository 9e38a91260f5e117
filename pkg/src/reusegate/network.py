"""All learned components of the reuse-gated segmentation model.

The model keeps two inference routes over a shared lightweight feature stem:

* full route: deep features (1/16, 1/32), a two-layer score head, and a
  U-shaped decoder that refines coarse score logits back up to input size;
* reuse route: a delta map edits the stored score logits, a multi-dilation
  translator edits the stored refined feature, and a shallow decoder that
  shares its final stage and mask head with the full route.

A template matcher compares each frame against a fixed frame-0 template and
feeds both the gate head (scalar reuse probability) and the delta generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


def logit(p):
    return math.log(p / (1.0 - p))


# number of residual pairs in the two deep stages; the deep stack is the
# desk-scale stand-in for a heavy backbone, so it deliberately dominates
# the full-route cost
DEEP_BLOCKS_16 = 3
DEEP_BLOCKS_32 = 2
SCORE_CLAMP = (0.01, 0.99)


@dataclass
class ModelConfig:
    stem_channels: tuple = (16, 32)
    deep_channels: tuple = (64, 64)
    c_f: int = 32
    c_r: int = 32
    score_channels: int = 64
    gate_channels: int | None = None
    gate_bias_init: float = logit(0.15)

    def __post_init__(self):
        channels = (*self.stem_channels, *self.deep_channels, self.c_f, self.c_r)
        if any(c < 1 for c in channels):
            raise ValueError("all channel counts must be >= 1")
        if self.c_r % 2:
            raise ValueError("c_r must be even (half-width internals)")

    @property
    def gate_width(self):
        return self.gate_channels if self.gate_channels is not None else self.c_f

    def to_text(self):
        return "".join(
            f"{k}={v}\n"
            for k, v in [
                ("stem_channels", f"{self.stem_channels[0]},{self.stem_channels[1]}"),
                ("deep_channels", f"{self.deep_channels[0]},{self.deep_channels[1]}"),
                ("c_f", self.c_f),
                ("c_r", self.c_r),
                ("score_channels", self.score_channels),
                ("gate_channels", "" if self.gate_channels is None else self.gate_channels),
                ("gate_bias_init", repr(self.gate_bias_init)),
            ]
        )

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                kv[k] = v
        return cls(
            stem_channels=tuple(int(x) for x in kv["stem_channels"].split(",")),
            deep_channels=tuple(int(x) for x in kv["deep_channels"].split(",")),
            c_f=int(kv["c_f"]),
            c_r=int(kv["c_r"]),
            score_channels=int(kv["score_channels"]),
            gate_channels=int(kv["gate_channels"]) if kv["gate_channels"] else None,
            gate_bias_init=float(kv["gate_bias_init"]),
        )


class Conv2d:
    """Convolution layer owning weight and bias parameters."""

    def __init__(self, name, c_in, c_out, k, rng, stride=1, dilation=1,
                 padding=None, weight_scale=1.0, bias_value=0.0):
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k // 2) if padding is None else padding
        std = weight_scale * math.sqrt(2.0 / (c_in * k * k))
        self.weight = Parameter(f"{name}.weight", rng.normal(0.0, std, (c_out, c_in, k, k)))
        self.bias = Parameter(f"{name}.bias", np.full((1, c_out, 1, 1), float(bias_value)))

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, dilation=self.dilation)

    def params(self):
        return [self.weight, self.bias]


class _Block:
    """conv3x3 -> relu -> conv3x3 -> relu with a half-width hidden layer."""

    def __init__(self, name, c_in, c_out, rng):
        self.c1 = Conv2d(f"{name}.c1", c_in, c_out // 2, 3, rng)
        self.c2 = Conv2d(f"{name}.c2", c_out // 2, c_out, 3, rng)

    def __call__(self, x):
        return T.relu(self.c2(T.relu(self.c1(x))))

    def params(self):
        return self.c1.params() + self.c2.params()


class _ResPair:
    """Residual unit: relu(x + conv(relu(conv(x))))."""

    def __init__(self, name, c, rng):
        self.c1 = Conv2d(f"{name}.c1", c, c, 3, rng)
        self.c2 = Conv2d(f"{name}.c2", c, c, 3, rng)

    def __call__(self, x):
        return T.relu(x + self.c2(T.relu(self.c1(x))))

    def params(self):
        return self.c1.params() + self.c2.params()


def mask_to_fraction(mask, factor=8):
    """Downsample a binary mask to per-cell foreground fractions."""
    m = np.asarray(mask).astype(np.float64)
    if m.ndim != 2:
        raise ValueError("mask must be 2-d")
    h, w = m.shape
    if h % factor or w % factor:
        raise ValueError(f"mask dims {h}x{w} not divisible by {factor}")
    frac = m.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return frac.reshape(1, 1, h // factor, w // factor)


def mask_to_logits(mask, factor=8, clamp=SCORE_CLAMP):
    """Downsampled mask as clamped logits; the score-map space of a mask."""
    frac = np.clip(mask_to_fraction(mask, factor), clamp[0], clamp[1])
    return np.log(frac / (1.0 - frac))


def init_score_from_mask(mask):
    """Initial score map: 8x area downsampling mapped to clamped logits."""
    return Tensor(mask_to_logits(mask, factor=8))


class ReuseGateNet:
    """Dual-route segmentation network with a reuse gate."""

    def __init__(self, cfg=None, seed=0, rng=None):
        self.cfg = cfg or ModelConfig()
        c = self.cfg
        if rng is None:
            rng = np.random.default_rng(np.random.SeedSequence(seed))
        s4, s8 = c.stem_channels
        d16, d32 = c.deep_channels

        self.stem_b1c1 = Conv2d("stem.b1c1", 3, max(1, s4 // 2), 3, rng, stride=2, padding=1)
        self.stem_b1c2 = Conv2d("stem.b1c2", max(1, s4 // 2), s4, 3, rng, stride=2, padding=1)
        self.stem_b2c1 = Conv2d("stem.b2c1", s4, s8, 3, rng, stride=2, padding=1)

        self.deep_d16_down = Conv2d("deep.d16.down", s8, d16, 3, rng, stride=2, padding=1)
        self.deep_d16_res = [
            _ResPair(f"deep.d16.res{i + 1}", d16, rng) for i in range(DEEP_BLOCKS_16)
        ]
        self.deep_d32_down = Conv2d("deep.d32.down", d16, d32, 3, rng, stride=2, padding=1)
        self.deep_d32_res = [
            _ResPair(f"deep.d32.res{i + 1}", d32, rng) for i in range(DEEP_BLOCKS_32)
        ]

        self.score_c1 = Conv2d("score.c1", d16, c.score_channels, 3, rng)
        self.score_c2 = Conv2d("score.c2", c.score_channels, 1, 3, rng)

        self.match_query = Conv2d("match.query", s8 + 1, c.c_f, 1, rng)
        self.match_fuse = Conv2d("match.fuse", 2 * c.c_f, c.c_f, 3, rng)

        gw = c.gate_width
        self.gate_c1 = Conv2d("gate.c1", c.c_f, gw, 3, rng)
        self.gate_c2 = Conv2d(
            "gate.c2", gw, 1, 3, rng, weight_scale=0.01, bias_value=c.gate_bias_init
        )

        self.delta_conv = Conv2d("delta.conv", c.c_f, 1, 3, rng, weight_scale=0.01)

        half = c.c_r // 2
        self.trans_b1 = Conv2d("trans.b1", c.c_r + 1, half, 3, rng, dilation=1)
        self.trans_b2 = Conv2d("trans.b2", c.c_r + 1, half, 3, rng, dilation=2)
        self.trans_b3 = Conv2d("trans.b3", c.c_r + 1, half, 3, rng, dilation=4)
        self.trans_merge = Conv2d("trans.merge", 3 * half, c.c_r, 1, rng)
        self.trans_res_c1 = Conv2d("trans.res.c1", c.c_r, half, 3, rng)
        self.trans_res_c2 = Conv2d("trans.res.c2", half, c.c_r, 3, rng)

        self.dec_r16 = _Block("dec.r16", d16 + d32 + 1, c.c_r, rng)
        self.dec_r8 = _Block("dec.r8", s8 + c.c_r + 1, c.c_r, rng)
        self.dec_r8p = _Block("dec.r8p", s8 + c.c_r + 1, c.c_r, rng)
        self.dec_r4 = _Block("dec.r4", s4 + c.c_r + 1, c.c_r, rng)
        self.dec_head = Conv2d("dec.head", c.c_r, 1, 1, rng)

        self._layers = [
            self.stem_b1c1, self.stem_b1c2, self.stem_b2c1,
            self.deep_d16_down, *self.deep_d16_res,
            self.deep_d32_down, *self.deep_d32_res,
            self.score_c1, self.score_c2,
            self.match_query, self.match_fuse,
            self.gate_c1, self.gate_c2,
            self.delta_conv,
            self.trans_b1, self.trans_b2, self.trans_b3,
            self.trans_merge, self.trans_res_c1, self.trans_res_c2,
            self.dec_r16, self.dec_r8, self.dec_r8p, self.dec_r4, self.dec_head,
        ]

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self):
        out = []
        for layer in self._layers:
            out.extend(layer.params())
        return out

    def score_parameters(self):
        return self.score_c1.params() + self.score_c2.params()

    def score_second_layer_parameters(self):
        return self.score_c2.params()

    def parameter_groups(self):
        """Parameters keyed by subsystem, for gradient-flow assertions."""
        return {
            "stem": self.stem_b1c1.params() + self.stem_b1c2.params() + self.stem_b2c1.params(),
            "deep": self.deep_d16_down.params()
            + [p for r in self.deep_d16_res for p in r.params()]
            + self.deep_d32_down.params()
            + [p for r in self.deep_d32_res for p in r.params()],
            "score": self.score_parameters(),
            "match": self.match_query.params() + self.match_fuse.params(),
            "gate": self.gate_c1.params() + self.gate_c2.params(),
            "delta": self.delta_conv.params(),
            "translator": self.trans_b1.params() + self.trans_b2.params()
            + self.trans_b3.params() + self.trans_merge.params()
            + self.trans_res_c1.params() + self.trans_res_c2.params(),
            "dec_r16": self.dec_r16.params(),
            "dec_r8": self.dec_r8.params(),
            "dec_r8p": self.dec_r8p.params(),
            "dec_r4": self.dec_r4.params(),
            "dec_head": self.dec_head.params(),
        }

    def state_dict(self):
        return {p.name: p.data for p in self.parameters()}

    def load_state(self, arrays):
        params = {p.name: p for p in self.parameters()}
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()
            p.reset_opt_state()

    def clone(self):
        dup = ReuseGateNet(self.cfg, seed=0)
        for dst, src in zip(dup.parameters(), self.parameters()):
            dst.data = src.data.copy()
        return dup

    # -- forward pieces --------------------------------------------------------

    def stem_forward(self, frame):
        """Shared stem: frame -> (f4, f8); runs on every frame."""
        _, _, h, w = frame.shape
        if h % 32 or w % 32:
            raise ValueError(f"frame dims {h}x{w} must be divisible by 32")
        x = T.relu(self.stem_b1c1(frame))
        f4 = T.relu(self.stem_b1c2(x))
        f8 = T.relu(self.stem_b2c1(f4))
        return f4, f8

    def deep_forward(self, f8):
        """Deep features (f16, f32); skipped entirely on the reuse route."""
        x = T.relu(self.deep_d16_down(f8))
        for block in self.deep_d16_res:
            x = block(x)
        f16 = x
        x = T.relu(self.deep_d32_down(f16))
        for block in self.deep_d32_res:
            x = block(x)
        return f16, x

    def score_generate(self, f16):
        """Two-layer score head at 1/16, upsampled to the 1/8 score grid."""
        if f16 is None:
            raise RuntimeError("score_generate needs deep features (full route only)")
        s = self.score_c2(T.relu(self.score_c1(f16)))
        return T.upsample_bilinear2x(s)

    def build_template(self, f8_0, s0):
        """Frame-0 reference feature; fixed for the rest of the video."""
        return T.relu(self.match_query(T.concat_channels([f8_0, s0])))

    def match_dissimilarity(self, f8_t, s_prev, template):
        """Compare the current query against the template; emphasis on change."""
        q = T.relu(self.match_query(T.concat_channels([f8_t, s_prev])))
        diff = T.abs_(q - template)
        return T.relu(self.match_fuse(T.concat_channels([q, diff])))

    def gate_probability(self, d_t):
        """Scalar reuse probability: pool, conv, pool, conv, mean, sigmoid."""
        _, _, h, w = d_t.shape
        if h < 4 or w < 4:
            raise ValueError(f"gate head needs spatial size >= 4, got {h}x{w}")
        x = T.maxpool2d(d_t)
        x = self.gate_c1(x)
        x = T.maxpool2d(x)
        x = self.gate_c2(x)
        return T.sigmoid(T.global_avg_pool(x))

    def generate_delta(self, d_t):
        """Signed score-map edit predicted from the dissimilarity feature."""
        return self.delta_conv(d_t)

    def refine_translate(self, r8_prev, delta):
        """Translate the stored refined feature to the current frame."""
        x = T.concat_channels([r8_prev, delta])
        branches = [T.relu(conv(x)) for conv in (self.trans_b1, self.trans_b2, self.trans_b3)]
        merged = T.relu(self.trans_merge(T.concat_channels(branches)))
        res = self.trans_res_c2(T.relu(self.trans_res_c1(merged)))
        return merged + res

    def decode_full(self, f32, f16, f8, f4, score):
        """U-shaped decoder over the full pyramid; also returns R8 for storage."""
        if f16 is None or f32 is None:
            raise RuntimeError("decode_full needs deep features (full route only)")
        s16 = T.avgpool2x2(score)
        r16 = self.dec_r16(T.concat_channels([f16, T.upsample_bilinear2x(f32), s16]))
        r8 = self.dec_r8(T.concat_channels([f8, T.upsample_bilinear2x(r16), score]))
        logits = self._decode_tail(f4, r8, score)
        return logits, r8

    def decode_reuse(self, r8_hat, f8, f4, score_hat):
        """Shallow decoder for the reuse route; shares the tail with decode_full."""
        r8p = self.dec_r8p(T.concat_channels([f8, r8_hat, score_hat]))
        return self._decode_tail(f4, r8p, score_hat)

    def _decode_tail(self, f4, r8, score):
        s4 = T.upsample_bilinear2x(score)
        r4 = self.dec_r4(T.concat_channels([f4, T.upsample_bilinear2x(r8), s4]))
        return T.upsample_bilinear2x(T.upsample_bilinear2x(self.dec_head(r4)))


# ---------------------------------------------------------------------------
# checkpoint plumbing


def save_model(path, model):
    T.save_checkpoint(path, model.parameters(), header=model.cfg.to_text())


def load_model(path):
    header, arrays = T.load_checkpoint(path)
    model = ReuseGateNet(ModelConfig.from_text(header))
    model.load_state(arrays)
    return model

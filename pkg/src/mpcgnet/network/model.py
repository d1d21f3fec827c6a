"""The full encoder/decoder graph with four deep-supervision heads."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..nn import CGMFEBlock, Conv2d, DepthwiseConv2d, DFABlock, GroupNorm, Module, Pointwise, WCADBlock
from ..nn.gates import GateSet
from ..tensor import Tensor

STRIDES = (4, 8, 16, 32)
INPUT_DIVISOR = 32


@dataclass
class NetConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    decoder_width: int = 32
    expansion: int = 4
    heads: int = 4
    window: int = 4
    reduction: int = 8
    use_cgmfe: bool = True
    use_wcad: bool = True
    use_dfa: bool = True
    use_gates: bool = True
    linear_is: bool = False
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 4:
            raise ValueError(f"encoder needs 4 stage widths, got {self.widths}")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"encoder widths must strictly increase, got {self.widths}")

    def to_pairs(self) -> list[tuple[str, str]]:
        out = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            out.append((f.name, str(val)))
        return out

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "NetConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in pairs.items():
            if key not in known:
                raise KeyError(f"unknown model config key: {key}")
            default = getattr(cls(), key)
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(v) for v in raw.split(","))
            elif isinstance(default, bool):
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes")
            else:
                kwargs[key] = int(raw)
        return cls(**kwargs)


@dataclass
class EncoderSpec:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    strides: tuple[int, ...] = STRIDES

    def build(self, rng: np.random.Generator) -> "ToyEncoder":
        return ToyEncoder(self.widths, rng)


class EncoderStage(Module):
    def __init__(self, cin, cout, rng, first: bool):
        if first:
            self.entry = Conv2d(cin, cout, 7, rng, stride=4, padding=3)
        else:
            self.entry = Conv2d(cin, cout, 3, rng, stride=2, padding=1)
        self.norm1 = GroupNorm(cout)
        self.conv = Conv2d(cout, cout, 3, rng)
        self.norm2 = GroupNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        x = T.gelu(self.norm1(self.entry(x)))
        return T.gelu(self.norm2(self.conv(x)))

    def param_count(self) -> int:
        return sum(m.param_count() for m in (self.entry, self.norm1, self.conv, self.norm2))

    def flops(self, h_out: int, w_out: int) -> int:
        return self.entry.flops(h_out, w_out) + self.conv.flops(h_out, w_out)


class ToyEncoder(Module):
    """Four convolutional stages at strides 4, 8, 16 and 32.

    Stands in for a pretrained backbone; anything returning four maps with
    these widths and strides can replace it.
    """

    def __init__(self, widths: Sequence[int], rng):
        self.widths = tuple(widths)
        chans = (3,) + self.widths
        self.stages = [EncoderStage(chans[i], chans[i + 1], rng, first=i == 0) for i in range(4)]

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def param_count(self) -> int:
        return sum(s.param_count() for s in self.stages)

    def flops(self, h: int, w: int) -> int:
        return sum(s.flops(h // st, w // st) for s, st in zip(self.stages, STRIDES))


class Interaction(Module):
    """Couples stage ``s`` encoder features with the previous stage's CGMFE output.

    The previous map is projected to this stage's width, halved in
    resolution by a stride-2 depthwise conv, multiplied into the encoder
    features and added back to them.
    """

    def __init__(self, c_prev: int, c_cur: int, rng):
        self.proj = Pointwise(c_prev, c_cur, rng)
        self.down = DepthwiseConv2d(c_cur, 3, rng, stride=2)

    def project(self, cgmfe_prev: Tensor) -> Tensor:
        return self.down(self.proj(cgmfe_prev))

    def forward(self, enc: Tensor, cgmfe_prev: Tensor) -> Tensor:
        if cgmfe_prev.shape[2:] != (2 * enc.shape[2], 2 * enc.shape[3]):
            raise ValueError(
                f"interaction: previous-stage map {cgmfe_prev.shape[2:]} must be twice "
                f"the encoder map {enc.shape[2:]}"
            )
        return combine_interaction(enc, self.project(cgmfe_prev))

    def param_count(self) -> int:
        return self.proj.param_count() + self.down.param_count()

    def flops(self, h: int, w: int) -> int:
        return self.proj.flops(2 * h, 2 * w) + self.down.flops(h, w)


def combine_interaction(enc: Tensor, proj: Tensor) -> Tensor:
    """``enc ⊙ proj + enc``."""
    return T.add(T.mul(enc, proj), enc)


def encoder_interaction(block: Interaction, enc_s: Tensor, cgmfe_prev: Tensor) -> Tensor:
    return block(enc_s, cgmfe_prev)


class CGMFEBypass(Module):
    """Ablation stand-in: pointwise projection of the encoder features."""

    def __init__(self, cin, cout, rng):
        self.proj = Pointwise(cin, cout, rng)

    def forward(self, x):
        return self.proj(x)

    def param_count(self):
        return self.proj.param_count()

    def flops(self, h, w):
        return self.proj.flops(h, w)


class WCADBypass(Module):
    """Ablation stand-in: upsample the deep map, concat with the shallow one, pointwise."""

    def __init__(self, c_shallow, c_deep, cout, rng):
        self.c_shallow, self.c_deep = c_shallow, c_deep
        self.proj = Pointwise(c_shallow + c_deep, cout, rng)

    def forward(self, shallow, deep):
        if (2 * deep.shape[2], 2 * deep.shape[3]) != shallow.shape[2:]:
            raise ValueError("WCAD bypass: deep map must be half the shallow size")
        return self.proj(T.concat_channels([shallow, T.bilinear_upsample(deep, 2)]))

    def param_count(self):
        return self.proj.param_count()

    def flops(self, h, w):
        return self.proj.flops(h, w)


class DFABypass(Module):
    """Ablation stand-in: pointwise over the concatenated inputs."""

    def __init__(self, in_channels, cout, rng):
        self.proj = Pointwise(sum(in_channels), cout, rng)

    def forward(self, feats):
        return self.proj(T.concat_channels(list(feats)))

    def param_count(self):
        return self.proj.param_count()

    def flops(self, h, w):
        return self.proj.flops(h, w)


@dataclass
class StageFeatures:
    enc: list[Tensor] = field(default_factory=list)
    cgmfe: list[Tensor] = field(default_factory=list)
    wcad: dict[int, Tensor] = field(default_factory=dict)
    dfa: dict[int, Tensor] = field(default_factory=dict)


class MPCGNet(Module):
    """Encoder, per-stage CGMFE, three WCAD/DFA decoder steps, four heads.

    ``forward(x, "train")`` returns four full-resolution logit maps from
    heads on CGMFE stage 4 and DFA 1..3 (bottom to top); ``"infer"``
    returns only the top DFA head.
    """

    def __init__(self, cfg: NetConfig | None = None, encoder: Module | None = None):
        self.cfg = cfg = cfg or NetConfig()
        rng = np.random.default_rng(cfg.seed)
        w = cfg.widths
        dw = cfg.decoder_width
        gates_open = not cfg.use_gates
        self.encoder = encoder if encoder is not None else EncoderSpec(w).build(rng)
        self.interactions = [Interaction(w[s - 1], w[s], rng) for s in range(1, 4)]
        if cfg.use_cgmfe:
            self.cgmfe = [
                CGMFEBlock(c, c, rng, cfg.expansion, gates_open=gates_open, linear_is=cfg.linear_is) for c in w
            ]
        else:
            self.cgmfe = [CGMFEBypass(c, c, rng) for c in w]
        # index 0 is the shallowest (stage 1) WCAD, index 2 the deepest
        self.wcad = []
        for s in range(3):
            c_deep = w[3] if s == 2 else dw
            if cfg.use_wcad:
                blk = WCADBlock(w[s], c_deep, dw, rng, dim=dw, heads=cfg.heads, window=cfg.window,
                                expansion=cfg.expansion, linear_is=cfg.linear_is)
            else:
                blk = WCADBypass(w[s], c_deep, dw, rng)
            self.wcad.append(blk)
        # dfa[0] is the deepest (DFA 1), dfa[2] the top one
        self.dfa = []
        for i in range(1, 4):
            ins = [w[3]] + [dw] * i
            if cfg.use_dfa:
                blk = DFABlock(ins, dw, dw, rng, cfg.expansion, cfg.reduction, gates_open=gates_open,
                               linear_is=cfg.linear_is)
            else:
                blk = DFABypass(ins, dw, rng)
            self.dfa.append(blk)
        self.heads = [Pointwise(w[3], 1, rng)] + [Pointwise(dw, 1, rng) for _ in range(3)]

    # -- graph

    def features(self, image: Tensor) -> StageFeatures:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected an (N, 3, H, W) image batch, got shape {image.shape}")
        h, w = image.shape[2:]
        if h % INPUT_DIVISOR or w % INPUT_DIVISOR:
            raise ValueError(f"input size {h}x{w} must be divisible by {INPUT_DIVISOR}")
        f = StageFeatures()
        f.enc = list(self.encoder(image))
        for s in range(4):
            x = f.enc[s] if s == 0 else self.interactions[s - 1](f.enc[s], f.cgmfe[s - 1])
            c = self.cgmfe[s](x)
            expect = (h // 2 ** (s + 2), w // 2 ** (s + 2))
            if c.shape[2:] != expect:
                raise RuntimeError(f"stage {s + 1} CGMFE map is {c.shape[2:]}, expected {expect}")
            f.cgmfe.append(c)
        c4 = f.cgmfe[3]
        f.wcad[3] = self.wcad[2](f.cgmfe[2], c4)
        f.dfa[1] = self.dfa[0](self._align([c4, f.wcad[3]]))
        f.wcad[2] = self.wcad[1](f.cgmfe[1], f.dfa[1])
        f.dfa[2] = self.dfa[1](self._align([c4, f.wcad[3], f.wcad[2]]))
        f.wcad[1] = self.wcad[0](f.cgmfe[0], f.dfa[2])
        f.dfa[3] = self.dfa[2](self._align([c4, f.wcad[3], f.wcad[2], f.wcad[1]]))
        return f

    @staticmethod
    def _align(maps: list[Tensor]) -> list[Tensor]:
        """Upsample every map to the resolution of the last (shallowest) one."""
        size = maps[-1].shape[2]
        return [T.bilinear_upsample(m, size // m.shape[2]) for m in maps]

    def head_logits(self, f: StageFeatures, idx: int, size: int) -> Tensor:
        """Full-resolution logits of supervision head ``idx`` (0 = CGMFE stage 4, 3 = top DFA)."""
        feat = (f.cgmfe[3], f.dfa[1], f.dfa[2], f.dfa[3])[idx]
        return T.bilinear_upsample(self.heads[idx](feat), size // feat.shape[2])

    def forward(self, image: Tensor, mode: str = "train") -> list[Tensor]:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        f = self.features(image)
        size = image.shape[2]
        if mode == "infer":
            return [self.head_logits(f, 3, size)]
        return [self.head_logits(f, i, size) for i in range(4)]

    # -- introspection

    def gate_sets(self) -> dict[str, GateSet | None]:
        out = {}
        for s, blk in enumerate(self.cgmfe, 1):
            out[f"cgmfe_s{s}"] = getattr(blk, "gates", None)
        for i, blk in enumerate(self.dfa, 1):
            out[f"dfa_{i}"] = getattr(blk, "gates", None)
        return out

    def gate_matrices(self) -> dict[str, np.ndarray]:
        """Binary gate matrices per fusion site.

        Forced-open sites (the no-gates ablation) report all ones; sites
        whose block is bypassed report all zeros.
        """
        out = {}
        for name, gs in self.gate_sets().items():
            k = 4 if name.startswith("cgmfe") else 3
            if gs is None:
                out[name] = np.zeros((k, k), dtype=np.int64)
            elif gs.forced_open:
                out[name] = np.ones((k, k), dtype=np.int64)
            else:
                out[name] = gs.values()
        return out

    def param_count(self) -> int:
        parts = [self.encoder, *self.interactions, *self.cgmfe, *self.wcad, *self.dfa, *self.heads]
        return sum(p.param_count() for p in parts)

    def flops(self, h: int, w: int) -> int:
        total = self.encoder.flops(h, w)
        res = [(h // st, w // st) for st in STRIDES]
        for s in range(1, 4):
            total += self.interactions[s - 1].flops(*res[s])
        for s in range(4):
            total += self.cgmfe[s].flops(*res[s])
        for s in range(3):
            total += self.wcad[s].flops(*res[s])
        for i, s in zip(range(3), (2, 1, 0)):
            total += self.dfa[i].flops(*res[s])
        total += self.heads[0].flops(*res[3])
        for i, s in zip(range(1, 4), (2, 1, 0)):
            total += self.heads[i].flops(*res[s])
        return total


def count_params(net: Module) -> int:
    """Analytic parameter count from the layer configuration."""
    return net.param_count()


def count_params_walk(net: Module) -> int:
    """Element count summed over the actual parameter tensors."""
    return sum(p.size for p in net.parameters())


def count_flops(net: MPCGNet, h: int, w: int) -> int:
    """Analytic FLOPs of one forward pass (one multiply-accumulate = 2 FLOPs)."""
    if h % INPUT_DIVISOR or w % INPUT_DIVISOR:
        raise ValueError(f"input size {h}x{w} must be divisible by {INPUT_DIVISOR}")
    return net.flops(h, w)

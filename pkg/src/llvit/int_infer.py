"""Integer-only inference: int8 activations and weights, int32/int64 accumulation.

Scales live only in the preparation step (``quantize_model``), which turns
every real rescaling factor into an integer multiplier and right shift.
After that, kernels see integers only. Rounding on requantization is half
away from zero; activations are clamped to [-127, 127].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .census import Census
from .condsum import condsum_add_only, quantize_encoded
from .nn_core import UsageError, int_matmul

QMAX = 127
RES_SHIFT = 12  # fractional bits of the aligned residual accumulator in the LUT mixer
LN_FRAC = 15  # fixed-point bits of the normalized value inside layernorm
EXP_FRAC = 16  # fixed-point bits of the base-2 exponent inside softmax
_LOG2E = 1.4426950408889634
# 2^u ~ 1 + C1 u + C2 u^2 on [0, 1), Q16 coefficients; C1 + C2 = 2^16 so 2^1 is exact
_C1 = 43267
_C2 = 22269


# --------------------------------------------------------------------------
# scales and fixed-point multipliers
# --------------------------------------------------------------------------


def scale_for(max_abs: float, qmax: int = QMAX) -> float:
    """Symmetric per-tensor scale; an all-zero tensor gets the sentinel 1."""
    return float(max_abs) / qmax if max_abs > 0 else 1.0


def quantize(x, scale: float, qmax: int = QMAX, dtype=np.int8) -> np.ndarray:
    """Round-half-even quantization used at preparation time and for the input image."""
    return np.clip(np.rint(np.asarray(x, np.float64) / scale), -qmax, qmax).astype(dtype)


def quantize_tensor(x, qmax: int = QMAX):
    """Returns ``(q, s)`` with ``s = max|x| / qmax``."""
    s = scale_for(float(np.abs(x).max(initial=0.0)), qmax)
    return quantize(x, s, qmax), s


@dataclass(frozen=True)
class Requant:
    """Integer approximation ``m * 2^-shift`` of a positive real factor (31-bit ``m``)."""

    m: int
    shift: int

    @classmethod
    def from_real(cls, real: float) -> "Requant":
        if real < 0 or not math.isfinite(real):
            raise ValueError(f"requant factor must be finite and >= 0, got {real}")
        if real == 0:
            return cls(0, 0)
        if real >= 2**31:
            raise ValueError("requant factor too large")
        frac, exp = math.frexp(real)
        m = int(round(frac * 2**31))
        if m == 2**31:
            m //= 2
            exp += 1
        return cls(m, 31 - exp)

    @property
    def real(self) -> float:
        return self.m * 2.0**-self.shift

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``round_half_away(x * m / 2^shift)`` as int64 (no clamping)."""
        x = np.asarray(x, np.int64)
        if x.size and (int(x.max()) >= 2**32 or int(x.min()) <= -(2**32)):
            raise OverflowError("requant input exceeds 32 bits")
        p = x * np.int64(self.m)
        if self.shift <= 0:
            return p << -self.shift
        if self.shift > 62:
            return np.zeros_like(p)
        # half away from zero: negative products lose one before the flooring shift
        p += np.int64(1) << np.int64(self.shift - 1)
        p -= x < 0
        return p >> np.int64(self.shift)


def requantize(x, rq: Requant, counter=None, qmax: int = QMAX) -> np.ndarray:
    """Rescale an accumulator into int8 with clamping to ``[-qmax, qmax]``."""
    if counter is not None:
        counter.add(mults=np.size(x), shifts=np.size(x))
    return np.clip(rq.apply(x), -qmax, qmax).astype(np.int8)


def round_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Integer division rounding half away from zero; ``den > 0``."""
    num = np.asarray(num, np.int64)
    den = np.asarray(den, np.int64)
    q = (np.abs(num) * 2 + den) // (2 * den)
    return np.where(num < 0, -q, q)


def bit_length(v: np.ndarray) -> np.ndarray:
    """Elementwise bit length of non-negative int64 values, by binary search on shifts."""
    v = np.asarray(v, np.int64).copy()
    n = np.zeros(v.shape, np.int64)
    for s in (32, 16, 8, 4, 2, 1):
        big = v >= (np.int64(1) << np.int64(s))
        n += np.where(big, s, 0)
        v = np.where(big, v >> np.int64(s), v)
    return n + (v > 0)


def isqrt_newton(v: np.ndarray, iters: int = 2) -> np.ndarray:
    """Integer square root estimate of non-negative int64 ``v``.

    Starts from the AM-GM bound ``(2^k + v / 2^k) / 2`` with ``k`` half the bit
    length (never below the true root), then runs ``iters`` Newton steps.
    """
    v = np.asarray(v, np.int64)
    k = bit_length(v) // 2
    p = np.int64(1) << k
    g = (p + (v >> k)) >> 1
    g = np.maximum(g, 1)
    for _ in range(iters):
        g = (g + v // g) >> 1
        g = np.maximum(g, 1)
    return np.where(v == 0, 0, g)


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------


def int_softmax(x: np.ndarray, rq_exp: Requant, counter=None) -> np.ndarray:
    """Row softmax of an int32 score matrix on a 1/127 output scale.

    ``rq_exp`` maps score units to Q16 base-2 exponent units, i.e. it
    approximates ``scale * log2(e) * 2^16``. Each row's outputs sum to
    exactly 127: the floor quotients are topped up by largest remainder,
    ties going to the lower index.
    """
    x = np.asarray(x, np.int64)
    shape = x.shape
    x = x.reshape(-1, shape[-1])
    n = x.shape[1]
    d = x - x.max(axis=1, keepdims=True)
    y = rq_exp.apply(d)
    y = np.maximum(y, -(31 << EXP_FRAC))
    ip = y >> EXP_FRAC  # floor, <= 0
    r = y - (ip << EXP_FRAC)  # [0, 2^16)
    poly = (np.int64(1) << EXP_FRAC) + ((_C1 * r + _C2 * ((r * r) >> EXP_FRAC)) >> EXP_FRAC)
    e = (poly << np.int64(14)) >> (-ip)
    total = e.sum(axis=1, keepdims=True)
    num = e * QMAX
    out = num // total
    rem = num - out * total
    short = QMAX - out.sum(axis=1)
    order = np.argsort(-rem, axis=1, kind="stable")
    bump = np.zeros_like(out)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(n)[None, :].repeat(len(out), 0), axis=1)
    bump[ranks < short[:, None]] = 1
    out = out + bump
    if counter is not None:
        counter.add(mults=x.size * 4, adds=x.size * 4, shifts=x.size * 3, divs=x.size,
                    compares=x.size)
    return out.reshape(shape).astype(np.int8)


def int_layernorm(x: np.ndarray, gamma_q: np.ndarray, beta_q: np.ndarray, rq: Requant,
                  counter=None) -> np.ndarray:
    """Layer normalization of int8 rows.

    The mean is carried exactly as ``D*x - sum(x)``; the variance of that
    quantity accumulates in int64 and its root comes from
    :func:`isqrt_newton`. ``rq`` rescales ``gamma_q * norm`` (norm in
    Q15) to the output scale; ``beta_q`` is already on the output scale.
    A constant row therefore maps to ``beta_q``.
    """
    x = np.asarray(x, np.int64)
    shape = x.shape
    x = x.reshape(-1, shape[-1])
    d = x.shape[1]
    if int(np.abs(x).max(initial=0)) > 255:
        raise OverflowError("int_layernorm expects int8-range inputs")
    xc = d * x - x.sum(axis=1, keepdims=True)
    t = (xc * xc).sum(axis=1, keepdims=True)
    std = isqrt_newton((t << np.int64(16)) // d)  # sqrt(var) * 2^8 in D-scaled units
    safe = np.maximum(std, 1)
    norm = np.where(std > 0, round_div(xc << np.int64(LN_FRAC + 8), safe), 0)
    y = rq.apply(norm * np.asarray(gamma_q, np.int64)) + np.asarray(beta_q, np.int64)
    if counter is not None:
        r = x.shape[0]
        counter.add(mults=3 * r * d, adds=4 * r * d, shifts=2 * r * d, divs=r * d + 4 * r)
    return np.clip(y, -QMAX, QMAX).astype(np.int8).reshape(shape)


def gelu_table(s_in: float, s_out: float) -> np.ndarray:
    """int8 -> int8 GELU lookup indexed by ``q + 128``."""
    q = np.arange(-128, 128, dtype=np.float64)
    v = q * s_in
    g = 0.5 * v * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v**3)))
    return quantize(g, s_out)


def thermometer_int_thresholds(thresholds: np.ndarray, s_z: float) -> np.ndarray:
    """``floor(t / s)`` clamped to the int8 range, so ``q > t'`` iff ``q * s > t``."""
    t = np.floor(np.asarray(thresholds, np.float64) / s_z)
    return np.clip(t, -128, 127).astype(np.int16)


def addresses_int(bits: np.ndarray, mapping: np.ndarray) -> np.ndarray:
    n = mapping.shape[1]
    g = np.take(bits, mapping.T.reshape(-1), axis=1).reshape(bits.shape[0], n, -1)
    addr = g[:, 0].astype(np.int32)
    for i in range(1, n):
        addr |= g[:, i].astype(np.int32) << i
    return addr


@dataclass
class IntLutMixer:
    """Integer form of a LUT channel mixer.

    ``wacc[D, J]`` holds the encoded values already aligned to the residual
    accumulator (residual scale / 2^RES_SHIFT), so the only multiply is the
    final requantization of each output.
    """

    thresholds: np.ndarray  # int16 [D, b]
    tables: list  # uint8 [J_k, 2^n] per LUT layer
    mappings: list  # int32 [J_k, n]
    wq: np.ndarray  # int8 [D, J], int4-range values
    align: Requant  # encoded-value units -> accumulator units
    out: Requant  # accumulator units -> output scale

    def __post_init__(self):
        self.wacc = self.align.apply(self.wq).astype(np.int32)

    def encode(self, z_q: np.ndarray) -> np.ndarray:
        d, b = self.thresholds.shape
        bits = z_q.reshape(-1, d, 1).astype(np.int16) > self.thresholds[None]
        return bits.reshape(-1, d * b).view(np.uint8)

    def lut_bits(self, z_q: np.ndarray, counter=None) -> np.ndarray:
        bits = self.encode(z_q)
        if counter is not None:
            counter.add(compares=bits.size)
        for table, mapping in zip(self.tables, self.mappings):
            addr = addresses_int(bits, mapping)
            bits = np.take_along_axis(table, addr.T, axis=1).T.copy()
            if counter is not None:
                counter.add(lookups=bits.size)
        return bits

    def forward(self, z_q: np.ndarray, res_q: np.ndarray, counter=None) -> np.ndarray:
        shape = res_q.shape
        d = self.wq.shape[0]
        fired = self.lut_bits(z_q.reshape(-1, d), counter)
        acc = res_q.reshape(-1, d).astype(np.int64) << RES_SHIFT
        if counter is not None:
            # instrumented path: explicit masked additions, one per fired LUT and channel
            acc = acc + condsum_add_only(self.wacc.astype(np.int64), fired, counter)
            counter.add(shifts=acc.size, adds=acc.size)
        else:
            acc = acc + int_matmul(fired, self.wacc.T)
        return requantize(acc, self.out, counter).reshape(shape)


@dataclass
class IntLinear:
    wq: np.ndarray  # int8 [d_in, d_out]
    bq: np.ndarray  # int32 [d_out], on the accumulator scale
    family: str

    def forward(self, x_q: np.ndarray, counter=None) -> np.ndarray:
        lead = x_q.shape[:-1]
        x2 = x_q.reshape(-1, x_q.shape[-1])
        acc = int_matmul(x2, self.wq).astype(np.int64) + self.bq
        if counter is not None:
            counter.gemm(self.family, x2.shape[0], x2.shape[1], self.wq.shape[1])
            counter.add(adds=acc.size)
        return acc.reshape(*lead, self.wq.shape[1])


@dataclass
class IntLayerNorm:
    gamma_q: np.ndarray
    beta_q: np.ndarray
    rq: Requant

    def forward(self, x_q, counter=None):
        return int_layernorm(x_q, self.gamma_q, self.beta_q, self.rq, counter)


@dataclass
class IntBlock:
    name: str
    heads: int
    ln1: IntLayerNorm
    q: IntLinear
    k: IntLinear
    v: IntLinear
    o: IntLinear
    rq_q: Requant
    rq_k: Requant
    rq_v: Requant
    rq_exp: Requant  # score units -> Q16 base-2 exponent
    rq_pv: Requant  # (P @ V) units -> merged scale
    res_attn: Requant  # attention output accumulator -> x units / 2^RES_SHIFT
    rq_x1: Requant  # aligned residual accumulator -> x1 scale
    ln2: IntLayerNorm
    mixer: object  # IntLutMixer or IntMlpMixer

    def forward(self, x_q: np.ndarray, census: Census | None = None) -> np.ndarray:
        c_ln1 = c_attn = c_ln2 = c_mix = None
        if census is not None:
            c_ln1 = census.at(f"{self.name}.ln1")
            c_attn = census.at(f"{self.name}.attn")
            c_ln2 = census.at(f"{self.name}.ln2")
            c_mix = census.at(f"{self.name}.mixer")
        b, n, d = x_q.shape
        h = self.ln1.forward(x_q, c_ln1)
        q = requantize(self.q.forward(h, c_attn), self.rq_q, c_attn)
        k = requantize(self.k.forward(h, c_attn), self.rq_k, c_attn)
        v = requantize(self.v.forward(h, c_attn), self.rq_v, c_attn)
        dh = d // self.heads

        def split(t):
            return t.reshape(b, n, self.heads, dh).transpose(0, 2, 1, 3)

        qh, kh, vh = split(q), split(k), split(v)
        s = int_matmul(qh, kh.swapaxes(-1, -2))
        p = int_softmax(s, self.rq_exp, c_attn)
        merged = requantize(int_matmul(p, vh), self.rq_pv, c_attn)
        if c_attn is not None:
            c_attn.gemm("qkT", b * self.heads * n, dh, n)
            c_attn.gemm("softmaxV", b * self.heads * n, n, dh)
        merged = merged.transpose(0, 2, 1, 3).reshape(b, n, d)
        acc = self.o.forward(merged, c_attn)
        x1 = residual_requant(x_q, acc, self.res_attn, self.rq_x1, c_attn)
        z = self.ln2.forward(x1, c_ln2)
        return self.mixer.forward(z, x1, c_mix)


def residual_requant(res_q, acc, align: Requant, out: Requant, counter=None):
    """``requant((res << RES_SHIFT) + align(acc))``: the residual add happens before requantization."""
    total = (np.asarray(res_q, np.int64) << RES_SHIFT) + align.apply(acc)
    if counter is not None:
        counter.add(mults=acc.size, shifts=2 * acc.size, adds=acc.size)
    return requantize(total, out, counter)


@dataclass
class IntMlpMixer:
    fc1: IntLinear
    rq_fc1: Requant
    gelu: np.ndarray  # int8 [256]
    fc2: IntLinear
    align: Requant
    out: Requant

    def forward(self, z_q, res_q, counter=None):
        a = requantize(self.fc1.forward(z_q, counter), self.rq_fc1, counter)
        g = self.gelu[a.astype(np.int16) + 128]
        if counter is not None:
            counter.add(lookups=g.size)
        acc = self.fc2.forward(g, counter)
        return residual_requant(res_q, acc, self.align, self.out, counter)


@dataclass
class IntModel:
    patch: int
    in_scale: float
    embed: IntLinear
    rq_embed: Requant
    pos_q: np.ndarray  # int32 [N, D] on the embedding scale
    cls_q: np.ndarray  # int32 [D]
    blocks: list = field(default_factory=list)
    norm: IntLayerNorm | None = None
    head: IntLinear | None = None

    def quantize_input(self, images: np.ndarray, census: Census | None = None) -> np.ndarray:
        if census is not None:
            census.at("input").add(mults=images.size)
        return quantize(images, self.in_scale)

    def forward(self, images: np.ndarray, census: Census | None = None) -> np.ndarray:
        """int32-range logits ``[B, C]`` (head accumulator) from float images."""
        from .model import to_patches

        x_q = self.quantize_input(images, census)
        return self.forward_int(to_patches(x_q, self.patch), census)

    def forward_int(self, patches_q: np.ndarray, census: Census | None = None) -> np.ndarray:
        c = census.at("embed") if census is not None else None
        acc = self.embed.forward(patches_q, c)
        tok = requantize(acc, self.rq_embed, c).astype(np.int64) + self.pos_q[1:]
        cls = np.broadcast_to(self.cls_q + self.pos_q[0], (len(acc), 1, acc.shape[-1]))
        x = np.clip(np.concatenate([cls, tok], axis=1), -QMAX, QMAX).astype(np.int8)
        if c is not None:
            c.add(adds=x.size)
        for blk in self.blocks:
            x = blk.forward(x, census)
        cn = census.at("norm") if census is not None else None
        ch = census.at("head") if census is not None else None
        cls_row = self.norm.forward(x[:, 0], cn)
        return self.head.forward(cls_row, ch)

    def predict(self, images, batch_size=256) -> np.ndarray:
        out = [self.forward(images[i:i + batch_size]).argmax(1)
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, np.int64)

    def mixer_int(self, index: int, z_q, res_q, counter=None):
        return self.blocks[index].mixer.forward(z_q, res_q, counter)


# --------------------------------------------------------------------------
# preparation from a float model
# --------------------------------------------------------------------------


def calibrate_ranges(model, images, batch_size=256) -> dict:
    """Max-abs of every traced activation over ``images``."""
    if len(images) == 0:
        raise UsageError("empty calibration set")
    trace: dict = {}
    for i in range(0, len(images), batch_size):
        model.forward(images[i:i + batch_size], trace=trace)
    return trace


def _linear(w, b, s_in, family):
    wq, s_w = quantize_tensor(w)
    bq = np.rint(np.asarray(b, np.float64) / (s_in * s_w)).astype(np.int64)
    return IntLinear(wq, bq, family), s_w


def _layernorm(ln, s_out):
    gq, s_g = quantize_tensor(ln.gamma.value)
    bq = np.rint(np.asarray(ln.beta.value, np.float64) / s_out).astype(np.int64)
    return IntLayerNorm(gq, bq, Requant.from_real(s_g * 2.0**-LN_FRAC / s_out))


def quantize_model(model, calib_images=None, encoded_bits: int | None = None,
                   ranges: dict | None = None) -> IntModel:
    """Build the integer model from a trained float model.

    Activation scales come from max-abs over a calibration pass on
    ``calib_images``, or from previously recorded ``ranges``. LUT mixers
    keep their bits as bits; only their encoded values and the
    requantization of their output need scales.
    """
    cfg = model.cfg
    for m in model.lut_mixers:
        if not m.codec.calibrated:
            raise UsageError(f"{m.name}: thermometer not calibrated")
    if ranges is None:
        if calib_images is None:
            raise UsageError("need calibration images or recorded activation ranges")
        ranges = calibrate_ranges(model, calib_images)
    tr = ranges
    s = {k: scale_for(v) for k, v in tr.items()}
    s_in = s["input"]
    embed, s_we = _linear(model.embed.proj.weight.value, model.embed.proj.bias.value, s_in, "embed")
    s_x = s["embed"]
    pos_q = np.rint(model.embed.pos.value.astype(np.float64) / s_x).astype(np.int64)
    cls_q = np.rint(model.embed.cls.value.astype(np.float64) / s_x).astype(np.int64)
    im = IntModel(cfg.patch_size, s_in, embed, Requant.from_real(s_in * s_we / s_x), pos_q, cls_q)
    dh = cfg.dim // cfg.heads
    for i, blk in enumerate(model.blocks):
        p = f"blocks.{i}"
        s_h, s_q, s_k, s_v = s[f"{p}.ln1"], s[f"{p}.q"], s[f"{p}.k"], s[f"{p}.v"]
        s_m, s_x1, s_z, s_out = s[f"{p}.attn"], s[f"{p}.x1"], s[f"{p}.ln2"], s[f"{p}.out"]
        a = {k: v.value for k, v in blk.attn.params.items()}
        lq, swq = _linear(a["wq"], a["bq"], s_h, "qkv")
        lk, swk = _linear(a["wk"], a["bk"], s_h, "qkv")
        lv, swv = _linear(a["wv"], a["bv"], s_h, "qkv")
        lo, swo = _linear(a["wo"], a["bo"], s_m, "concat")
        res_unit = s_x / 2**RES_SHIFT
        mixer = _prep_mixer(blk.mixer, s_z, s_x1, s_out, s, p, encoded_bits)
        im.blocks.append(IntBlock(
            name=p, heads=cfg.heads, ln1=_layernorm(blk.ln1, s_h),
            q=lq, k=lk, v=lv, o=lo,
            rq_q=Requant.from_real(s_h * swq / s_q),
            rq_k=Requant.from_real(s_h * swk / s_k),
            rq_v=Requant.from_real(s_h * swv / s_v),
            rq_exp=Requant.from_real(s_q * s_k / math.sqrt(dh) * _LOG2E * 2**EXP_FRAC),
            rq_pv=Requant.from_real(s_v / QMAX / s_m),
            res_attn=Requant.from_real(s_m * swo / res_unit),
            rq_x1=Requant.from_real(res_unit / s_x1),
            ln2=_layernorm(blk.ln2, s_z), mixer=mixer))
        s_x = s_out
    im.norm = _layernorm(model.norm, s["norm"])
    im.head, _ = _linear(model.head.weight.value, model.head.bias.value, s["norm"], "head")
    return im


def _prep_mixer(mixer, s_z, s_x1, s_out, s, prefix, encoded_bits):
    res_unit = s_x1 / 2**RES_SHIFT
    if mixer.kind == "lut":
        q = mixer.condsum.quantized
        if q is None or (encoded_bits is not None and q.bits != encoded_bits):
            q = quantize_encoded(mixer.condsum.w.value, encoded_bits or 4)
        if q.scale.size != 1:
            raise UsageError("the integer mixer needs a per-tensor cond-sum scale")
        return IntLutMixer(
            thresholds=thermometer_int_thresholds(mixer.codec.thresholds, s_z),
            tables=[layer.truth_table() for layer in mixer.luts],
            mappings=[layer.mapping.copy() for layer in mixer.luts],
            wq=q.wq.copy(),
            align=Requant.from_real(float(q.scale[0]) / res_unit),
            out=Requant.from_real(res_unit / s_out))
    s_a, s_g = s[f"{prefix}.fc1"], s[f"{prefix}.gelu"]
    fc1, sw1 = _linear(mixer.fc1.weight.value, mixer.fc1.bias.value, s_z, "ff1")
    fc2, sw2 = _linear(mixer.fc2.weight.value, mixer.fc2.bias.value, s_g, "ff2")
    return IntMlpMixer(fc1, Requant.from_real(s_z * sw1 / s_a), gelu_table(s_a, s_g), fc2,
                       Requant.from_real(s_g * sw2 / res_unit), Requant.from_real(res_unit / s_out))


def fake_quantize_weights(model, bits: int = 8):
    """Round-trip every weight matrix through symmetric per-tensor quantization in place.

    Returns the original state so callers can restore it.
    """
    saved = {p.name: p.value.copy() for p in model.parameters()}
    qmax = 2 ** (bits - 1) - 1
    for p in model.parameters():
        if p.value.ndim == 2 and not p.name.endswith(".latent"):
            q, sc = quantize_tensor(p.value, qmax)
            p.value[...] = (q.astype(np.float64) * sc).astype(np.float32)
    return saved


def agreement(int_model: IntModel, model, images, batch_size=256) -> float:
    """Fraction of images where integer and float argmax agree."""
    a = int_model.predict(images, batch_size)
    b = model.predict(images, batch_size).argmax(1)
    return float((a == b).mean()) if len(a) else 1.0

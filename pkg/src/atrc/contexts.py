"""Relational context operators and the Context Pooling (CP) block.

Spatial tensors entering the attention operators are flattened to
``N x L x d`` (batch, pixels, channels). Region maps are ``N x L x R``.
"""

from __future__ import annotations

import enum
import math
from pathlib import Path

import numpy as np

from .autodiff import functional as F
from .autodiff import nn
from .autodiff.tensor import (
    ShapeError,
    Tensor,
    clamp_min,
    einsum,
    getitem,
    matmul,
    mul,
    reshape,
    softmax,
    transpose,
    tsum,
    zeros,
)
from .imageio import to_u8, write_pgm

DENOM_FLOOR = 1e-12
_MASK_FILL = -1e30


class ContextType(str, enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"
    T_LABEL = "t_label"
    S_LABEL = "s_label"
    NONE = "none"

    @property
    def index(self) -> int:
        return CONTEXT_TYPES.index(self)

    @classmethod
    def from_index(cls, i: int) -> ContextType:
        return CONTEXT_TYPES[int(i)]


CONTEXT_TYPES: list[ContextType] = list(ContextType)
NUM_CONTEXTS = len(CONTEXT_TYPES)


# --- layout helpers -----------------------------------------------------------

def flatten_spatial(x: Tensor) -> Tensor:
    """N x C x H x W -> N x (H*W) x C."""
    n, c, h, w = x.shape
    return transpose(reshape(x, (n, c, h * w)), (0, 2, 1))


def unflatten_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """N x (H*W) x C -> N x C x H x W."""
    n, l, c = x.shape
    if l != h * w:
        raise ShapeError("unflatten_spatial", x.shape, (h, w))
    return reshape(transpose(x, (0, 2, 1)), (n, c, h, w))


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def spatial_softmax(a: Tensor) -> Tensor:
    """Raw region scores N x R x H x W -> column-stochastic maps N x L x R."""
    n, r, h, w = a.shape
    return transpose(softmax(reshape(a, (n, r, h * w)), axis=-1), (0, 2, 1))


# --- attention operators ------------------------------------------------------

def attention_quadratic(q: Tensor, k: Tensor, v: Tensor, scale: float | None = None
                        ) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v. Returns the output and the attention matrix."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("attention_quadratic", q.shape, k.shape, detail="d_k mismatch")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention_quadratic", k.shape, v.shape, detail="key/value length mismatch")
    d_k = q.shape[-1]
    scale = 1.0 / math.sqrt(d_k) if scale is None else scale
    scores = mul(matmul(q, _swap_last(k)), np.asarray(scale, dtype=q.dtype))
    attn = softmax(scores, axis=-1)
    return matmul(attn, v), attn


def global_context_linearized(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Linear-kernel attention: v'_i = q_i (sum_j k_j^T v_j) / (q_i . sum_j k_j).

    The key-value summary is formed once, so cost is linear in the pixel count.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("global_context_linearized", q.shape, k.shape, detail="d_k mismatch")
    if (q.data < 0).any() or (k.data < 0).any():
        raise ValueError("global_context_linearized: queries and keys must be non-negative")
    kv = matmul(_swap_last(k), v)                        # ... d_k x d_v
    num = matmul(q, kv)                                  # ... L_q x d_v
    ksum = tsum(k, axis=-2, keepdims=True)               # ... 1 x d_k
    den = tsum(mul(q, ksum), axis=-1, keepdims=True)     # ... L_q x 1
    return num / clamp_min(den, DENOM_FLOOR)


def local_context(q: Tensor, k: Tensor, v: Tensor, b: int, h: int, w: int,
                  return_attention: bool = False):
    """Softmax attention restricted to the b x b neighbourhood of each target pixel.

    Windows are clipped at the image border; the softmax runs over in-bounds
    neighbours only.
    """
    if b % 2 != 1 or b < 1:
        raise ValueError(f"local_context: window extent must be odd and >= 1, got {b}")
    n, l, d_k = q.shape
    if l != h * w or k.shape[1] != l or v.shape[1] != l:
        raise ShapeError("local_context", q.shape, k.shape, v.shape, detail=f"H*W={h * w}")
    if k.shape[-1] != d_k:
        raise ShapeError("local_context", q.shape, k.shape, detail="d_k mismatch")
    kw = F.window_gather(unflatten_spatial(k, h, w), b)        # N H W b2 d
    vw = F.window_gather(unflatten_spatial(v, h, w), b)
    q4 = reshape(q, (n, h, w, d_k))
    scores = mul(einsum("nhwd,nhwkd->nhwk", q4, kw), np.asarray(1.0 / math.sqrt(d_k), dtype=q.dtype))
    valid = F.window_valid_mask(h, w, b)
    bias = np.where(valid, 0.0, _MASK_FILL).astype(q.dtype)[None]
    attn = softmax(scores + Tensor(bias), axis=-1)
    out = reshape(einsum("nhwk,nhwkd->nhwd", attn, vw), (n, l, v.shape[-1]))
    if return_attention:
        return out, attn
    return out


def label_prototypes(f_s: Tensor, a_hat: Tensor) -> Tensor:
    """Region prototypes p = A_hat^T F_S: N x L x C, N x L x R -> N x R x C."""
    if f_s.shape[-2] != a_hat.shape[-2]:
        raise ShapeError("label_prototypes", f_s.shape, a_hat.shape, detail="pixel count mismatch")
    if f_s.ndim == 2:
        return matmul(_swap_last(a_hat), f_s)
    return einsum("nlr,nlc->nrc", a_hat, f_s)


# --- learned modules --------------------------------------------------------------

class QKVProjection(nn.Module):
    """f_q, f_k, f_v as 1x1 conv + batch norm + activation."""

    def __init__(self, in_t: int, in_s: int, d_k: int, d_v: int, rng: np.random.Generator,
                 qk_act: str = "relu"):
        super().__init__()
        self.f_q = nn.ConvBNAct(in_t, d_k, 1, rng, act=qk_act)
        self.f_k = nn.ConvBNAct(in_s, d_k, 1, rng, act=qk_act)
        self.f_v = nn.ConvBNAct(in_s, d_v, 1, rng, act="relu")
        self.d_k, self.d_v = d_k, d_v

    def forward(self, f_t: Tensor, f_s: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return project_qkv(f_t, f_s, self)


def project_qkv(f_t: Tensor, f_s: Tensor, proj: QKVProjection) -> tuple[Tensor, Tensor, Tensor]:
    """q from target features, k and v from source features (all NCHW)."""
    if f_t.shape[2:] != f_s.shape[2:]:
        raise ShapeError("project_qkv", f_t.shape, f_s.shape, detail="spatial mismatch")
    return proj.f_q(f_t), proj.f_k(f_s), proj.f_v(f_s)


class _Candidate(nn.Module):
    """Shared shape: projections, an attention rule, then conv1x1 + affine-free BN."""

    def __init__(self, feat: int, d_k: int, d_v: int, rng: np.random.Generator, qk_act: str = "relu"):
        super().__init__()
        self.proj = QKVProjection(feat, feat, d_k, d_v, rng, qk_act=qk_act)
        self.out_conv = nn.Conv2d(d_v, d_v, 1, rng, bias=False)
        self.out_bn = nn.BatchNorm2d(d_v, affine=False)
        self.last_attention: np.ndarray | None = None
        self.keep_attention = False

    def _finish(self, v_prime: Tensor, h: int, w: int) -> Tensor:
        return self.out_bn(self.out_conv(unflatten_spatial(v_prime, h, w)))


class GlobalContext(_Candidate):
    def __init__(self, feat, d_k, d_v, rng):
        super().__init__(feat, d_k, d_v, rng, qk_act="softplus")

    def forward(self, f_t, f_s, a_t, a_s):
        h, w = f_t.shape[2:]
        q, k, v = self.proj(f_t, f_s)
        q, k, v = flatten_spatial(q), flatten_spatial(k), flatten_spatial(v)
        out = global_context_linearized(q, k, v)
        if self.keep_attention:
            sim = np.einsum("nid,njd->nij", q.data, k.data)
            self.last_attention = sim / np.maximum(sim.sum(-1, keepdims=True), DENOM_FLOOR)
        return self._finish(out, h, w)


class LocalContext(_Candidate):
    def __init__(self, feat, d_k, d_v, rng, window: int = 9):
        super().__init__(feat, d_k, d_v, rng)
        if window % 2 != 1 or window < 1:
            raise ValueError(f"local window extent must be odd and >= 1, got {window}")
        self.window = window

    def forward(self, f_t, f_s, a_t, a_s):
        h, w = f_t.shape[2:]
        q, k, v = self.proj(f_t, f_s)
        out, attn = local_context(flatten_spatial(q), flatten_spatial(k), flatten_spatial(v),
                                  self.window, h, w, return_attention=True)
        if self.keep_attention:
            self.last_attention = _local_to_dense(attn.data, h, w, self.window)
        return self._finish(out, h, w)


def _local_to_dense(attn: np.ndarray, h: int, w: int, b: int) -> np.ndarray:
    n = attn.shape[0]
    r = b // 2
    dense = np.zeros((n, h * w, h * w), dtype=attn.dtype)
    for i in range(h):
        for j in range(w):
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    y, x = i + di, j + dj
                    if 0 <= y < h and 0 <= x < w:
                        dense[:, i * w + j, y * w + x] = attn[:, i, j, (di + r) * b + (dj + r)]
    return dense


class LabelContext(_Candidate):
    """Attention over region prototypes; ``use_target_regions`` selects T-label vs S-label."""

    def __init__(self, feat, d_k, d_v, rng, use_target_regions: bool):
        super().__init__(feat, d_k, d_v, rng)
        self.use_target_regions = use_target_regions

    def forward(self, f_t, f_s, a_t, a_s):
        h, w = f_t.shape[2:]
        a_hat = a_t if self.use_target_regions else a_s
        out, attn = label_context(f_t, f_s, a_hat, self.proj)
        if self.keep_attention:
            self.last_attention = attn.data
        return self._finish(out, h, w)


def label_context(f_t: Tensor, f_s: Tensor, a_hat: Tensor, proj: QKVProjection) -> tuple[Tensor, Tensor]:
    """Each target pixel attends over the R prototypes of the source features."""
    n, c, h, w = f_s.shape
    r = a_hat.shape[-1]
    if r == 0:
        raise ValueError("label_context: region count is zero")
    if a_hat.shape[:2] != (n, h * w):
        raise ShapeError("label_context", f_s.shape, a_hat.shape)
    protos = label_prototypes(flatten_spatial(f_s), a_hat)           # N R C
    proto_img = reshape(transpose(protos, (0, 2, 1)), (n, c, r, 1))  # prototypes as an R x 1 image
    q = proj.f_q(f_t)
    k = proj.f_k(proto_img)
    v = proj.f_v(proto_img)
    return attention_quadratic(flatten_spatial(q), flatten_spatial(k), flatten_spatial(v))


def none_context(shape: tuple[int, ...], dtype=np.float32) -> Tensor:
    return zeros(shape, dtype)


class CPBlock(nn.Module):
    """One source -> target distillation unit holding all candidate contexts it may need.

    ``allowed`` restricts which candidates get built (a fixed architecture only
    needs one).
    """

    def __init__(self, feat: int, d_k: int, d_v: int, rng: np.random.Generator, window: int = 9,
                 allowed: list[ContextType] | None = None):
        super().__init__()
        allowed = list(CONTEXT_TYPES) if allowed is None else list(allowed)
        self.allowed = allowed
        self.d_v = d_v
        self.candidates: dict[str, _Candidate] = {}
        builders = {
            ContextType.GLOBAL: lambda: GlobalContext(feat, d_k, d_v, rng),
            ContextType.LOCAL: lambda: LocalContext(feat, d_k, d_v, rng, window),
            ContextType.T_LABEL: lambda: LabelContext(feat, d_k, d_v, rng, True),
            ContextType.S_LABEL: lambda: LabelContext(feat, d_k, d_v, rng, False),
        }
        for ct in CONTEXT_TYPES:
            if ct in allowed and ct is not ContextType.NONE:
                self.candidates[ct.value] = builders[ct]()

    def run_candidate(self, ct: ContextType, f_t, f_s, a_t, a_s) -> Tensor:
        n, _, h, w = f_t.shape
        if ct is ContextType.NONE:
            return none_context((n, self.d_v, h, w), f_t.dtype)
        if ct.value not in self.candidates:
            raise KeyError(f"CP block was built without the {ct.value} candidate")
        return self.candidates[ct.value](f_t, f_s, a_t, a_s)

    def forward(self, f_t: Tensor, f_s: Tensor, a_t: Tensor | None, a_s: Tensor | None,
                mode: ContextType | Tensor | np.ndarray) -> Tensor:
        if isinstance(mode, ContextType):
            return self.run_candidate(mode, f_t, f_s, a_t, a_s)
        return cp_block_mix(self, f_t, f_s, a_t, a_s, mode)


def cp_block_mix(block: CPBlock, f_t, f_s, a_t, a_s, weights) -> Tensor:
    """Convex combination of every candidate's output."""
    wt = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=f_t.dtype))
    wd = wt.data
    if wd.shape != (NUM_CONTEXTS,) or (wd < -1e-5).any() or abs(float(wd.sum()) - 1.0) > 1e-5:
        raise ValueError(f"cp_block_mix: weights {wd} are not on the simplex")
    n, _, h, w = f_t.shape
    outs = []
    for ct in CONTEXT_TYPES:
        if ct is ContextType.NONE:
            continue  # contributes w_none * 0
        o = block.run_candidate(ct, f_t, f_s, a_t, a_s)
        outs.append(mul(o, reshape(getitem(wt, ct.index), (1, 1, 1, 1))))
    if not outs:
        return none_context((n, block.d_v, h, w), f_t.dtype)
    total = outs[0]
    for o in outs[1:]:
        total = total + o
    return total


def mix_or_select(candidate_outputs: list[Tensor], z) -> Tensor:
    """sum_i z_i * O_i over candidate outputs of identical shape."""
    shapes = {o.shape for o in candidate_outputs}
    if len(shapes) != 1:
        raise ShapeError("mix_or_select", *shapes)
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=candidate_outputs[0].dtype))
    if zt.shape != (len(candidate_outputs),):
        raise ShapeError("mix_or_select", zt.shape, (len(candidate_outputs),))
    zd = zt.data
    hot = np.flatnonzero(zd)
    if not zt.requires_grad and len(hot) == 1 and zd[hot[0]] == 1.0:
        return candidate_outputs[int(hot[0])]
    ndim = candidate_outputs[0].ndim
    total = None
    for i, o in enumerate(candidate_outputs):
        term = mul(o, reshape(getitem(zt, i), (1,) * ndim))
        total = term if total is None else total + term
    return total


# --- visualisation ----------------------------------------------------------------

def attention_heat(row: np.ndarray, h: int, w: int, a_hat: np.ndarray | None = None) -> np.ndarray:
    """Turn one attention row into an H x W map in [0, 1].

    Rows over R label prototypes are spread back to pixels through ``a_hat`` (L x R).
    """
    row = np.asarray(row, dtype=np.float64)
    if a_hat is not None:
        row = np.asarray(a_hat, dtype=np.float64) @ row
    if row.size != h * w:
        raise ShapeError("attention_heat", row.shape, (h, w))
    lo, hi = row.min(), row.max()
    if hi - lo <= 0:
        unit = np.full(row.shape, 0.5)
    else:
        unit = (row - lo) / (hi - lo)
    return unit.reshape(h, w)


def export_attention_map(row: np.ndarray, h: int, w: int, path: str | Path,
                         a_hat: np.ndarray | None = None) -> Path:
    return write_pgm(path, to_u8(attention_heat(row, h, w, a_hat)))


def attention_map_filename(target: str, source: str, context: ContextType | str, pixel: int) -> str:
    ctx = context.value if isinstance(context, ContextType) else context
    return f"{target}_{source}_{ctx}_{pixel}.pgm"

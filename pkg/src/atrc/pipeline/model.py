"""Backbone, task heads, auxiliary region heads and the CP-block distillation stage."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import nn
from ..autodiff.tensor import Tensor, concat, stop_gradient
from ..contexts import CONTEXT_TYPES, ContextType, CPBlock, spatial_softmax
from ..label_space import regions_from_gt
from .tasks import TaskSpec

MODES = ("search", "fixed", "uniform", "none", "single", "no_self_attention")
REGION_SOURCES = ("predicted", "gt")


@dataclass
class ModelConfig:
    width: int = 32              # backbone channels C
    depth: int = 3               # backbone conv blocks
    feat: int = 32               # task feature width F
    d_k: int = 16
    d_v: int = 16
    window: int = 9
    mode: str = "search"
    context: str | None = None   # for mode "uniform"
    arch: list[str] | None = None  # for mode "fixed": N*N context names, target-major
    self_attention: bool = True
    region_source: str = "predicted"
    fuse_zero_init: bool = True  # start the fused context branch at zero (BN scale 0)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.region_source not in REGION_SOURCES:
            raise ValueError(f"unknown region source {self.region_source!r}")
        if min(self.width, self.depth, self.feat, self.d_k, self.d_v) < 1:
            raise ValueError("model widths must be positive")
        if self.mode == "uniform":
            ContextType(self.context)
        if self.mode == "fixed" and not self.arch:
            raise ValueError("mode 'fixed' needs an arch list")

    @property
    def searching(self) -> bool:
        return self.mode in ("search", "no_self_attention")

    @property
    def distills(self) -> bool:
        return self.mode not in ("none", "single")


class AuxHead(nn.Module):
    """1x1 conv-BN-ReLU then a 1x1 conv to R region logits."""

    def __init__(self, in_ch: int, hidden: int, regions: int, rng):
        super().__init__()
        self.hidden = nn.ConvBNAct(in_ch, hidden, 1, rng)
        self.out = nn.Conv2d(hidden, regions, 1, rng, bias=True)

    def forward(self, x):
        return self.out(self.hidden(x))


@dataclass
class ForwardOutput:
    preds: dict[str, Tensor]
    aux: dict[str, Tensor]
    cp: dict[tuple[str, str], Tensor] = field(default_factory=dict)
    a_hat: dict[str, Tensor] = field(default_factory=dict)


class MultiTaskNet(nn.Module):
    def __init__(self, config: ModelConfig, tasks: list[TaskSpec], seed: int = 0):
        super().__init__()
        if config.mode == "single":
            if len(tasks) != 1:
                raise ValueError("single-task mode takes exactly one task")
        elif len(tasks) < 2:
            raise ValueError("a multi-task model needs at least two tasks")
        self.config = config
        self.tasks = list(tasks)
        self.task_names = [t.name for t in tasks]
        n = len(tasks)
        c = config
        rng = np.random.default_rng([seed, 1])
        self.backbone = [nn.ConvBNAct(3 if i == 0 else c.width, c.width, 3, rng) for i in range(c.depth)]
        self.heads = {t.name: nn.ConvBNAct(c.width, c.feat, 3, rng) for t in tasks}
        self.aux = {t.name: AuxHead(c.width, c.feat, t.regions.n_regions, rng) for t in tasks}
        self.fixed_arch = self._fixed_arch(n)
        # an all-"none" architecture distills nothing, so it is built as the plain baseline
        self.distills = c.distills and not (self.fixed_arch is not None
                                            and all(a is ContextType.NONE for a in self.fixed_arch))
        self.blocks: dict[str, CPBlock] = {}
        self.fuse: dict[str, nn.ConvBNAct] = {}
        if self.distills:
            for ti, t in enumerate(self.task_names):
                for si, s in enumerate(self.task_names):
                    j = ti * n + si
                    if c.searching:
                        allowed = list(CONTEXT_TYPES)
                        if ti == si and (not c.self_attention or c.mode == "no_self_attention"):
                            allowed = [ContextType.NONE]
                    else:
                        allowed = [self.fixed_arch[j]]
                    self.blocks[f"{t}__{s}"] = CPBlock(c.feat, c.d_k, c.d_v, rng, c.window, allowed)
                self.fuse[t] = nn.ConvBNAct(n * c.d_v, c.feat, 1, rng, act="none")
                if c.fuse_zero_init:
                    self.fuse[t].bn.gamma.data[:] = 0.0
        post_in = 2 * c.feat if self.distills else c.feat
        self.post = {t.name: nn.ConvBNAct(post_in, c.feat, 1, rng) for t in tasks}
        self.pred = {t.name: nn.Conv2d(c.feat, t.out_channels, 1, rng, bias=True) for t in tasks}

    def _fixed_arch(self, n: int) -> list[ContextType] | None:
        c = self.config
        if c.mode == "fixed":
            if len(c.arch) != n * n:
                raise ValueError(f"arch lists {len(c.arch)} blocks, expected {n * n}")
            arch = [ContextType(a) for a in c.arch]
        elif c.mode == "uniform":
            arch = [ContextType(c.context)] * (n * n)
        else:
            return None
        if not c.self_attention:
            arch = [ContextType.NONE if j // n == j % n else a for j, a in enumerate(arch)]
        return arch

    def pinned_blocks(self) -> dict[int, ContextType]:
        """Blocks excluded from the search (self-attention removed)."""
        n = len(self.tasks)
        if not self.config.searching:
            return {}
        return {j: ContextType.NONE for j in range(n * n)
                if self.blocks[self._key(j)].allowed == [ContextType.NONE]}

    def _key(self, j: int) -> str:
        n = len(self.tasks)
        return f"{self.task_names[j // n]}__{self.task_names[j % n]}"

    def block(self, target: str, source: str) -> CPBlock:
        return self.blocks[f"{target}__{source}"]

    def backbone_features(self, images) -> Tensor:
        """Images as an array, or as a Tensor when gradients w.r.t. the input are wanted."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        for layer in self.backbone:
            x = layer(x)
        return x

    @property
    def dtype(self):
        return self.backbone[0].conv.weight.dtype

    def region_maps(self, aux: dict[str, Tensor], labels: dict[str, np.ndarray] | None) -> dict[str, Tensor]:
        """A_hat per task: spatial softmax of the (detached) aux logits, or normalised GT membership."""
        out = {}
        for t in self.tasks:
            if self.config.region_source == "gt":
                if labels is None:
                    raise ValueError("ground-truth regions need labels at forward time")
                onehot = regions_from_gt(labels[t.name], t.regions).astype(np.float64)
                counts = onehot.sum(axis=1, keepdims=True)
                l = onehot.shape[1]
                a_hat = np.where(counts > 0, onehot / np.maximum(counts, 1), 1.0 / l)
                out[t.name] = Tensor(a_hat.astype(self.dtype))
            else:
                out[t.name] = spatial_softmax(stop_gradient(aux[t.name]))
        return out

    def forward(self, images: np.ndarray, arch: list | None = None, labels: dict | None = None,
                cp_replace: dict[tuple[str, str], np.ndarray] | None = None,
                keep_cp: bool = False) -> ForwardOutput:
        """``arch`` holds one ContextType or simplex weight Tensor per block (target-major)."""
        c = self.config
        x = self.backbone_features(images)
        feats = {t: self.heads[t](x) for t in self.task_names}
        x_aux = stop_gradient(x)
        aux = {t: self.aux[t](x_aux) for t in self.task_names}
        if not self.distills:
            preds = {t: self.pred[t](self.post[t](feats[t])) for t in self.task_names}
            return ForwardOutput(preds, aux)
        arch = self.fixed_arch if arch is None else arch
        if arch is None:
            raise ValueError("a searching model needs explicit per-block weights")
        n = len(self.task_names)
        if len(arch) != n * n:
            raise ValueError(f"arch lists {len(arch)} blocks, expected {n * n}")
        need_regions = any(isinstance(a, Tensor) or a in (ContextType.T_LABEL, ContextType.S_LABEL)
                           for a in arch)
        a_hat = self.region_maps(aux, labels) if need_regions else {}
        out = ForwardOutput({}, aux, a_hat=a_hat)
        for ti, t in enumerate(self.task_names):
            parts = []
            for si, s in enumerate(self.task_names):
                o = self.blocks[f"{t}__{s}"](feats[t], feats[s], a_hat.get(t), a_hat.get(s), arch[ti * n + si])
                if cp_replace is not None and (t, s) in cp_replace:
                    o = Tensor(np.asarray(cp_replace[(t, s)], dtype=o.dtype))
                if keep_cp:
                    out.cp[(t, s)] = o
                parts.append(o)
            fused = self.fuse[t](concat(parts, axis=1))
            out.preds[t] = self.pred[t](self.post[t](concat([fused, feats[t]], axis=1)))
        return out

    def trunk_parameters(self) -> list[nn.Parameter]:
        ps = []
        for layer in self.backbone:
            ps.extend(layer.parameters())
        return ps


def build_model(config: ModelConfig, tasks: list[TaskSpec], seed: int = 0) -> MultiTaskNet:
    return MultiTaskNet(config, tasks, seed)

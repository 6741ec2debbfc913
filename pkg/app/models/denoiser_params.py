"""Weights of the conditional denoiser and the per-scene conditioning tokens."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, Tuple

import numpy as np

AGENT_FEATURES = 4
MAP_FEATURES = 6
GRID_CHANNELS = 3
FFN_MULT = 2


def parameter_shapes(embed_dim: int, horizon: int, modes: int) -> Dict[str, Tuple[int, ...]]:
    d, h, t2 = embed_dim, FFN_MULT * embed_dim, 2 * horizon
    shapes = {
        'enc.in.w': (d, d), 'enc.in.b': (d,),
        'enc.attn.wq': (d, d), 'enc.attn.wk': (d, d), 'enc.attn.wv': (d, d), 'enc.attn.wo': (d, d),
        'enc.ln.g': (d,), 'enc.ln.b': (d,),
        'enc.ff1.w': (d, h), 'enc.ff1.b': (h,), 'enc.ff2.w': (h, d), 'enc.ff2.b': (d,),
        'step.w': (d, d),
        'pool.grid.w': (GRID_CHANNELS, d), 'pool.grid.b': (d,),
        'pool.alpha.w': (d, horizon), 'pool.alpha.b': (horizon,),
        'pool.mlp1.w': (d, d), 'pool.mlp1.b': (d,), 'pool.mlp2.w': (d, d), 'pool.mlp2.b': (d,),
        'dec.query': (modes, d),
        'dec.agent_proj.w': (AGENT_FEATURES, d), 'dec.agent_proj.b': (d,),
        'dec.map_proj.w': (MAP_FEATURES, d), 'dec.map_proj.b': (d,),
    }
    for block in ('agent', 'map', 'nav'):
        for name in ('wq', 'wk', 'wv', 'wo'):
            shapes[f'dec.{block}.{name}'] = (d, d)
    shapes.update({
        'dec.ln.g': (d,), 'dec.ln.b': (d,),
        'dec.ff1.w': (d, h), 'dec.ff1.b': (h,), 'dec.ff2.w': (h, d), 'dec.ff2.b': (d,),
        'head.fc1.w': (d, d), 'head.fc1.b': (d,), 'head.fc2.w': (d, t2), 'head.fc2.b': (t2,),
    })
    return shapes


@dataclass
class DenoiserParams:
    """
    Named weight tensors with one gradient buffer each.

    `version` increases on every in-place weight update so a forward cache
    can tell whether it still describes the current weights.
    """
    embed_dim: int
    num_heads: int
    horizon: int
    modes: int
    tensors: Dict[str, np.ndarray]
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = 0

    def __post_init__(self):
        expected = parameter_shapes(self.embed_dim, self.horizon, self.modes)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"parameter set mismatch; missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            tensor = np.asarray(self.tensors[name], dtype=np.float64)
            if tensor.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tensor.shape}")
            if not np.all(np.isfinite(tensor)):
                raise ValueError(f"{name}: non-finite weights")
            self.tensors[name] = tensor
        if not self.grads:
            self.zero_grad()

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.tensors))

    def zero_grad(self) -> None:
        self.grads = {name: np.zeros_like(t) for name, t in self.tensors.items()}

    def bump_version(self) -> None:
        self.version += 1

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def weight_norms(self) -> Dict[str, float]:
        return {name: float(np.linalg.norm(self.tensors[name])) for name in self}

    def shape_dict(self) -> Dict[str, int]:
        return {'embed_dim': self.embed_dim, 'num_heads': self.num_heads,
                'horizon': self.horizon, 'modes': self.modes}

    def copy(self) -> DenoiserParams:
        return DenoiserParams(self.embed_dim, self.num_heads, self.horizon, self.modes,
                              {k: v.copy() for k, v in self.tensors.items()},
                              {k: v.copy() for k, v in self.grads.items()}, self.version)


@dataclass(frozen=True, eq=False)
class SceneTokens:
    """
    Raw conditioning inputs of one scene.

    Agent and map rows are projected to d-dim tokens inside the forward pass,
    so their projections train with the rest of the network. The positional
    terms P_agent / P_map are fixed sine embeddings. `grid` is the (nx, ny, C)
    scene raster sampled by trajectory pooling.
    """
    agent_features: np.ndarray
    agent_pos: np.ndarray
    map_features: np.ndarray
    map_pos: np.ndarray
    grid: np.ndarray
    grid_origin: np.ndarray
    cell_size: float

    def __post_init__(self):
        for name in ('agent_features', 'agent_pos', 'map_features', 'map_pos', 'grid'):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"scene tokens: non-finite {name}")
        if len(self.agent_features) != len(self.agent_pos) or len(self.map_features) != len(self.map_pos):
            raise ValueError("scene tokens: positional terms do not match token counts")

    @property
    def num_agents(self) -> int:
        return len(self.agent_features)

    @property
    def num_map(self) -> int:
        return len(self.map_features)

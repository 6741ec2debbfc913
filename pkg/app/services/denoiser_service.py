"""Conditional trajectory denoiser with hand-written reverse mode.

One forward pass handles the M modes of a scene together:

    F_tau  = Enc(noisy)             F_ref, nav = Enc(anchor)
    inst   = F_tau + F_ref + PE(step) W_step
    F_traj = TrajPool(noisy, inst, scene grid)
    F_out  = Decode(F_traj, Q, agent / map / nav tokens)
    pred   = Head(F_out)

Decode attends in three stages, residual only around the final FFN:

    F_agent = MHCA(Q + F_traj, agents + P_agent, agents)
    F_map   = MHCA(Q + F_agent, map + P_map, map)
    F_nav   = MHCA(F_map, nav, nav)
    F_out   = FFN(LayerNorm(F_nav)) + F_nav

All trajectories are in normalized space (meters / norm_scale).
"""
import logging
from typing import Dict, Optional, Tuple, Union

import numpy as np

from app.config import RunConfig
from app.exceptions import InvalidDim, StaleCache
from app.models.denoiser_params import GRID_CHANNELS, DenoiserParams, SceneTokens, parameter_shapes
from app.models.scene import Scene
from app.models.trajectory import Trajectory
from app.services import layers
from app.services.safety_service import bilinear_sample, polyline_distance
from app.utils.seeding import make_rng

logger = logging.getLogger(__name__)

CLEARANCE_CAP = 10.0
SPEED_SCALE = 10.0
MAP_CHUNK = 10
ATTENTION_KEYS = ('wq', 'wk', 'wv', 'wo')

ArrayLike = Union[np.ndarray, Trajectory]


def sine_embed(positions, dim: int) -> np.ndarray:
    """Interleaved sin/cos embedding at geometrically spaced frequencies (base 1e4)"""
    if dim <= 0 or dim % 2:
        raise InvalidDim(f"embedding dim must be a positive even number, got {dim}")
    positions = np.asarray(positions, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = positions[..., None] * freqs
    out = np.empty(positions.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def embed_points(points: np.ndarray, dim: int, scale: float) -> np.ndarray:
    """(..., 2) positions -> (..., dim); x and y take dim/2 channels each"""
    if dim % 4:
        raise InvalidDim(f"point embedding needs dim divisible by 4, got {dim}")
    points = np.asarray(points, dtype=np.float64)
    return np.concatenate([sine_embed(points[..., 0] * scale, dim // 2),
                           sine_embed(points[..., 1] * scale, dim // 2)], axis=-1)


def _as_batch(traj) -> np.ndarray:
    if isinstance(traj, Trajectory):
        traj = traj.points
    traj = np.asarray(traj, dtype=np.float64)
    return traj[None] if traj.ndim == 2 else traj


class DenoiserService:
    """
    The denoising network: parameter initialisation, scene tokenisation,
    forward pass with activation cache, and exact reverse-mode gradients.
    """

    def __init__(self, config: RunConfig):
        self.config = config

    @property
    def dim(self) -> int:
        return self.config.embed_dim

    @property
    def heads(self) -> int:
        return self.config.num_heads

    def shape_dict(self) -> Dict[str, int]:
        c = self.config
        return {'embed_dim': c.embed_dim, 'num_heads': c.num_heads, 'horizon': c.horizon, 'modes': c.modes}

    def init_params(self, seed: Optional[int] = None) -> DenoiserParams:
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LayerNorm gains"""
        c = self.config
        rng = make_rng(c.seed if seed is None else seed, 0xD1)
        tensors = {}
        for name, shape in parameter_shapes(c.embed_dim, c.horizon, c.modes).items():
            leaf = name.rsplit('.', 1)[1]
            if leaf == 'g':
                tensors[name] = np.ones(shape)
            elif leaf == 'b':
                tensors[name] = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(shape[-1] if name == 'dec.query' else shape[0])
                tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32).astype(np.float64)
        params = DenoiserParams(c.embed_dim, c.num_heads, c.horizon, c.modes, tensors)
        logger.debug("initialised denoiser with %d parameters", params.num_parameters())
        return params

    def build_scene_tokens(self, scene: Scene) -> SceneTokens:
        """Agent rows, map chunk rows and the pooling raster of one scene"""
        c = self.config
        d = self.dim
        field = scene.safety_field
        nx, ny = field.shape
        origin = field.origin.as_array()

        if not c.use_condition:
            return SceneTokens(np.zeros((0, 4)), np.zeros((0, d)), np.zeros((0, 6)), np.zeros((0, d)),
                               np.zeros((nx, ny, GRID_CHANNELS)), origin, field.cell_size)

        agent_features = np.array([[a.velocity[0] / SPEED_SCALE, a.velocity[1] / SPEED_SCALE, a.radius, 1.0]
                                   for a in scene.agents]).reshape(-1, 4)
        agent_xy = np.array([a.position.as_array() for a in scene.agents]).reshape(-1, 2)
        agent_pos = embed_points(agent_xy / c.norm_scale, d, c.embed_scale)

        rows, centroids = [], []
        for polyline in scene.map_polylines:
            points = polyline.points
            boundary = 1.0 if polyline.kind == 'boundary' else 0.0
            for i in range(0, len(points) - 1, MAP_CHUNK):
                j = min(i + MAP_CHUNK, len(points) - 1)
                start, end = points[i] / c.norm_scale, points[j] / c.norm_scale
                rows.append([start[0], start[1], end[0], end[1], boundary, 1.0])
                centroids.append(points[i:j + 1].mean(axis=0))
        map_features = np.array(rows, dtype=np.float64).reshape(-1, 6)
        map_pos = embed_points(np.array(centroids).reshape(-1, 2) / c.norm_scale, d, c.embed_scale)

        gx, gy = np.meshgrid(origin[0] + field.cell_size * np.arange(nx),
                             origin[1] + field.cell_size * np.arange(ny), indexing='ij')
        cells = np.stack([gx.ravel(), gy.ravel()], axis=1)
        lane = np.exp(-polyline_distance(cells, scene.centerlines)).reshape(nx, ny)
        clearance = np.minimum(field.grid, CLEARANCE_CAP) / CLEARANCE_CAP
        grid = np.stack([clearance, np.exp(-field.grid), lane], axis=-1)
        return SceneTokens(agent_features, agent_pos, map_features, map_pos, grid, origin, field.cell_size)

    # -- encoder ---------------------------------------------------------

    def _encode(self, p: Dict[str, np.ndarray], traj: np.ndarray) -> Tuple[np.ndarray, np.ndarray, dict]:
        d = self.dim
        horizon = traj.shape[1]
        e = embed_points(traj, d, self.config.embed_scale) + sine_embed(np.arange(horizon), d)
        x0, c_in = layers.linear(e, p['enc.in.w'], p['enc.in.b'])
        a, c_attn = layers.attention(x0, x0, x0, self._attn(p, 'enc.attn'), self.heads)
        x1 = x0 + a
        n, c_ln = layers.layernorm(x1, p['enc.ln.g'], p['enc.ln.b'])
        h_pre, c_ff1 = layers.linear(n, p['enc.ff1.w'], p['enc.ff1.b'])
        h, c_act = layers.silu(h_pre)
        f, c_ff2 = layers.linear(h, p['enc.ff2.w'], p['enc.ff2.b'])
        x2 = x1 + f
        cache = {'in': c_in, 'attn': c_attn, 'ln': c_ln, 'ff1': c_ff1, 'act': c_act, 'ff2': c_ff2,
                 'horizon': horizon}
        return x2.mean(axis=1), x2, cache

    def _encode_backward(self, params: DenoiserParams, d_feature: np.ndarray,
                         d_seq: Optional[np.ndarray], cache: dict) -> None:
        dx2 = np.repeat(d_feature[:, None, :] / cache['horizon'], cache['horizon'], axis=1)
        if d_seq is not None:
            dx2 = dx2 + d_seq
        dh, grads = layers.linear_backward(dx2, cache['ff2'])
        self._accumulate(params, 'enc.ff2', grads)
        dn, grads = layers.linear_backward(layers.silu_backward(dh, cache['act']), cache['ff1'])
        self._accumulate(params, 'enc.ff1', grads)
        dx1_ln, grads = layers.layernorm_backward(dn, cache['ln'])
        self._accumulate(params, 'enc.ln', grads)
        dx1 = dx2 + dx1_ln
        dq, dk, dv, grads = layers.attention_backward(dx1, cache['attn'])
        self._accumulate(params, 'enc.attn', grads)
        _, grads = layers.linear_backward(dx1 + dq + dk + dv, cache['in'])
        self._accumulate(params, 'enc.in', grads)

    def encode_trajectory(self, params: DenoiserParams, traj: ArrayLike) -> np.ndarray:
        """Mean-pooled self-attention encoding; (d,) for one trajectory, (M, d) for a batch"""
        points = traj.points if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
        feature, _, _ = self._encode(params.tensors, _as_batch(points))
        return feature[0] if points.ndim == 2 else feature

    # -- trajectory pooling ----------------------------------------------

    def _pool(self, p: Dict[str, np.ndarray], noisy: np.ndarray, inst: np.ndarray,
              tokens: SceneTokens) -> Tuple[np.ndarray, dict]:
        modes, horizon, _ = noisy.shape
        # waypoints are already absolute ego-frame positions
        meters = noisy * self.config.norm_scale
        index = (meters.reshape(-1, 2) - tokens.grid_origin) / tokens.cell_size
        raw, clamped = bilinear_sample(tokens.grid, index)
        raw = raw.reshape(modes, horizon, -1)
        if np.any(clamped):
            logger.debug("trajectory pooling clamped %d waypoints outside the scene grid", int(clamped.sum()))

        sampled, c_grid = layers.linear(raw, p['pool.grid.w'], p['pool.grid.b'])
        logits, c_alpha = layers.linear(inst, p['pool.alpha.w'], p['pool.alpha.b'])
        alpha = layers.softmax(logits)
        pooled = np.einsum('mt,mtd->md', alpha, sampled)
        h_pre, c1 = layers.linear(pooled, p['pool.mlp1.w'], p['pool.mlp1.b'])
        h, c_act = layers.silu(h_pre)
        out, c2 = layers.linear(h, p['pool.mlp2.w'], p['pool.mlp2.b'])
        cache = {'grid': c_grid, 'alpha_lin': c_alpha, 'alpha': alpha, 'sampled': sampled,
                 'mlp1': c1, 'act': c_act, 'mlp2': c2, 'clamped': int(clamped.sum())}
        return out + inst, cache

    def _pool_backward(self, params: DenoiserParams, dout: np.ndarray, cache: dict) -> np.ndarray:
        dh, grads = layers.linear_backward(dout, cache['mlp2'])
        self._accumulate(params, 'pool.mlp2', grads)
        dpooled, grads = layers.linear_backward(layers.silu_backward(dh, cache['act']), cache['mlp1'])
        self._accumulate(params, 'pool.mlp1', grads)
        alpha, sampled = cache['alpha'], cache['sampled']
        dalpha = np.einsum('md,mtd->mt', dpooled, sampled)
        _, grads = layers.linear_backward(alpha[..., None] * dpooled[:, None, :], cache['grid'])
        self._accumulate(params, 'pool.grid', grads)
        dinst, grads = layers.linear_backward(layers.softmax_backward(dalpha, alpha), cache['alpha_lin'])
        self._accumulate(params, 'pool.alpha', grads)
        return dout + dinst

    def traj_pool(self, params: DenoiserParams, noisy: ArrayLike, inst_feature: np.ndarray,
                  tokens: SceneTokens) -> Tuple[np.ndarray, np.ndarray]:
        """Fused trajectory feature and the attention weights over waypoints"""
        out, cache = self._pool(params.tensors, _as_batch(noisy), np.atleast_2d(inst_feature), tokens)
        return out, cache['alpha']

    # -- decoder ---------------------------------------------------------

    def _context(self, p: Dict[str, np.ndarray], block: str, proj: str, query: np.ndarray, x: np.ndarray,
                 features: np.ndarray, pos: np.ndarray, diagnostics: dict) -> Tuple[np.ndarray, Optional[dict]]:
        """MHCA(query + x, features + pos, features); without tokens x passes through"""
        if len(features) == 0:
            diagnostics['skipped'].append(block)
            logger.debug("no %s tokens; %s cross-attention passes through", block, block)
            return x, None
        modes = x.shape[0]
        tokens, c_proj = layers.linear(features, p[f'{proj}.w'], p[f'{proj}.b'])
        keys = np.broadcast_to(tokens + pos, (modes,) + tokens.shape)
        values = np.broadcast_to(tokens, (modes,) + tokens.shape)
        out, c_attn = layers.attention((query + x)[:, None, :], keys, values, self._attn(p, block), self.heads)
        return out[:, 0, :], {'proj': c_proj, 'attn': c_attn}

    def _context_backward(self, params: DenoiserParams, block: str, proj: str, dout: np.ndarray,
                          cache: Optional[dict]) -> Optional[np.ndarray]:
        """Gradient with respect to the attention query; None for a skipped block"""
        if cache is None:
            return None
        dq, dk, dv, grads = layers.attention_backward(dout[:, None, :], cache['attn'])
        self._accumulate(params, block, grads)
        _, grads = layers.linear_backward((dk + dv).sum(axis=0), cache['proj'])
        self._accumulate(params, proj, grads)
        return dq[:, 0, :]

    def _decode(self, p: Dict[str, np.ndarray], f_traj: np.ndarray, nav: np.ndarray,
                tokens: SceneTokens) -> Tuple[np.ndarray, dict]:
        query = p['dec.query'][:len(f_traj)]
        diagnostics = {'skipped': []}
        f_agent, c_agent = self._context(p, 'dec.agent', 'dec.agent_proj', query, f_traj,
                                         tokens.agent_features, tokens.agent_pos, diagnostics)
        f_map, c_map = self._context(p, 'dec.map', 'dec.map_proj', query, f_agent,
                                     tokens.map_features, tokens.map_pos, diagnostics)
        att, c_nav = layers.attention(f_map[:, None, :], nav, nav, self._attn(p, 'dec.nav'), self.heads)
        f_nav = att[:, 0, :]
        n, c_ln = layers.layernorm(f_nav, p['dec.ln.g'], p['dec.ln.b'])
        h_pre, c_ff1 = layers.linear(n, p['dec.ff1.w'], p['dec.ff1.b'])
        h, c_act = layers.silu(h_pre)
        f, c_ff2 = layers.linear(h, p['dec.ff2.w'], p['dec.ff2.b'])
        cache = {'agent': c_agent, 'map': c_map, 'nav': c_nav, 'ln': c_ln, 'ff1': c_ff1,
                 'act': c_act, 'ff2': c_ff2, 'diagnostics': diagnostics, 'modes': len(f_traj)}
        return f_nav + f, cache

    def _decode_backward(self, params: DenoiserParams, dout: np.ndarray,
                         cache: dict) -> Tuple[np.ndarray, np.ndarray]:
        dh, grads = layers.linear_backward(dout, cache['ff2'])
        self._accumulate(params, 'dec.ff2', grads)
        dn, grads = layers.linear_backward(layers.silu_backward(dh, cache['act']), cache['ff1'])
        self._accumulate(params, 'dec.ff1', grads)
        df_nav_ln, grads = layers.layernorm_backward(dn, cache['ln'])
        self._accumulate(params, 'dec.ln', grads)
        df_nav = dout + df_nav_ln

        dq, dk, dv, grads = layers.attention_backward(df_nav[:, None, :], cache['nav'])
        self._accumulate(params, 'dec.nav', grads)
        d_nav_tokens = dk + dv

        # walk map then agent; a skipped stage hands its gradient straight to its input
        d_input = dq[:, 0, :]
        d_query = np.zeros_like(d_input)
        for block, proj, name in (('dec.map', 'dec.map_proj', 'map'), ('dec.agent', 'dec.agent_proj', 'agent')):
            dq_block = self._context_backward(params, block, proj, d_input, cache[name])
            if dq_block is not None:
                d_query += dq_block
                d_input = dq_block
        params.grads['dec.query'][:cache['modes']] += d_query
        return d_input, d_nav_tokens

    def decode(self, params: DenoiserParams, f_traj: np.ndarray, tokens: SceneTokens,
               nav_tokens: np.ndarray) -> Tuple[np.ndarray, dict]:
        """F_out for (M, d) trajectory features; nav_tokens is (M, T, d)"""
        out, cache = self._decode(params.tensors, np.atleast_2d(f_traj), nav_tokens, tokens)
        weights = {name: cache[name]['attn']['weights'] if cache[name] else None for name in ('agent', 'map')}
        weights['nav'] = cache['nav']['weights']
        return out, {'weights': weights, 'skipped': cache['diagnostics']['skipped']}

    # -- regression head -------------------------------------------------

    def _head(self, p: Dict[str, np.ndarray], f_out: np.ndarray) -> Tuple[np.ndarray, dict]:
        h_pre, c1 = layers.linear(f_out, p['head.fc1.w'], p['head.fc1.b'])
        h, c_act = layers.silu(h_pre)
        y, c2 = layers.linear(h, p['head.fc2.w'], p['head.fc2.b'])
        return y.reshape(len(f_out), -1, 2), {'fc1': c1, 'act': c_act, 'fc2': c2}

    def _head_backward(self, params: DenoiserParams, dpred: np.ndarray, cache: dict) -> np.ndarray:
        dh, grads = layers.linear_backward(dpred.reshape(len(dpred), -1), cache['fc2'])
        self._accumulate(params, 'head.fc2', grads)
        df_out, grads = layers.linear_backward(layers.silu_backward(dh, cache['act']), cache['fc1'])
        self._accumulate(params, 'head.fc1', grads)
        return df_out

    def regress_head(self, params: DenoiserParams, f_out: np.ndarray) -> np.ndarray:
        """(M, d) -> (M, T, 2) clean trajectories in normalized space"""
        pred, _ = self._head(params.tensors, np.atleast_2d(f_out))
        return pred

    def regress_head_input_grad(self, params: DenoiserParams, f_out: np.ndarray, dpred: np.ndarray) -> np.ndarray:
        """Gradient of <dpred, head(f_out)> with respect to f_out; parameter buffers are left untouched"""
        f_out = np.atleast_2d(f_out)
        _, cache = self._head(params.tensors, f_out)
        dh = np.asarray(dpred).reshape(len(f_out), -1) @ params.tensors['head.fc2.w'].T
        return layers.silu_backward(dh, cache['act']) @ params.tensors['head.fc1.w'].T

    # -- full network ----------------------------------------------------

    def forward(self, params: DenoiserParams, noisy: ArrayLike, step: int, anchors: ArrayLike,
                tokens: SceneTokens) -> Tuple[np.ndarray, dict]:
        """
        Predict clean trajectories for every mode.

        Args:
            params: Network weights
            noisy: (M, T, 2) noised trajectories in normalized space
            step: Diffusion step the inputs were noised to
            anchors: (M, T, 2) normalized anchors; their encodings form the nav tokens
            tokens: Scene conditioning from build_scene_tokens

        Returns:
            Tuple[np.ndarray, dict]: (M, T, 2) predictions and the activation cache
        """
        p = params.tensors
        noisy, anchors = _as_batch(noisy), _as_batch(anchors)
        f_tau, _, c_noisy = self._encode(p, noisy)
        f_ref, nav, c_anchor = self._encode(p, anchors)
        step_vec = sine_embed(float(step), self.dim)
        inst = f_tau + f_ref + step_vec @ p['step.w']
        f_traj, c_pool = self._pool(p, noisy, inst, tokens)
        f_out, c_dec = self._decode(p, f_traj, nav, tokens)
        pred, c_head = self._head(p, f_out)
        cache = {
            'params_id': id(params), 'version': params.version,
            'noisy': c_noisy, 'anchor': c_anchor, 'step_vec': step_vec,
            'pool': c_pool, 'decode': c_dec, 'head': c_head,
            'diagnostics': {'clamped': c_pool['clamped'], 'skipped': list(c_dec['diagnostics']['skipped'])},
        }
        return pred, cache

    def predict(self, params: DenoiserParams, noisy: ArrayLike, step: int, anchors: ArrayLike,
                tokens: SceneTokens) -> np.ndarray:
        pred, _ = self.forward(params, noisy, step, anchors, tokens)
        return pred

    def backward(self, params: DenoiserParams, dpred: np.ndarray, cache: Optional[dict]) -> None:
        """Accumulate d(loss)/d(weights) into params.grads given d(loss)/d(pred)"""
        if cache is None:
            raise StaleCache("backward called without a forward cache")
        if cache['params_id'] != id(params) or cache['version'] != params.version:
            raise StaleCache(f"forward cache is for weights v{cache['version']}, current v{params.version}")
        dpred = np.asarray(dpred, dtype=np.float64)
        df_out = self._head_backward(params, dpred, cache['head'])
        df_traj, d_nav = self._decode_backward(params, df_out, cache['decode'])
        dinst = self._pool_backward(params, df_traj, cache['pool'])
        params.grads['step.w'] += np.outer(cache['step_vec'], dinst.sum(axis=0))
        self._encode_backward(params, dinst, None, cache['noisy'])
        self._encode_backward(params, dinst, d_nav, cache['anchor'])

    @staticmethod
    def _attn(p: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
        return {k: p[f'{prefix}.{k}'] for k in ATTENTION_KEYS}

    @staticmethod
    def _accumulate(params: DenoiserParams, prefix: str, grads: Dict[str, np.ndarray]) -> None:
        for key, grad in grads.items():
            params.grads[f'{prefix}.{key}'] += grad

"""Forward/backward pairs for the fixed set of layers the denoiser is built from.

Every forward returns `(output, cache)`; the matching backward takes the
upstream gradient and that cache and returns input gradients plus a dict of
parameter gradients. Leading axes are batch axes throughout.
"""
from typing import Dict, Tuple

import numpy as np
from scipy.special import expit

LN_EPS = 1e-5


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, tuple]:
    return x @ w + b, (x, w)


def linear_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ w.T, {'w': x2.T @ d2, 'b': d2.sum(axis=0)}


def silu(x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    s = expit(x)
    return x * s, (x, s)


def silu_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    x, s = cache
    return dout * s * (1.0 + x * (1.0 - s))


def layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, tuple]:
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    xhat, inv, g = cache
    n = xhat.shape[-1]
    dxhat = dout * g
    dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    grads = {
        'g': (dout * xhat).reshape(-1, n).sum(axis=0),
        'b': dout.reshape(-1, n).sum(axis=0),
    }
    return dx, grads


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_backward(dout: np.ndarray, s: np.ndarray) -> np.ndarray:
    return s * (dout - (dout * s).sum(axis=-1, keepdims=True))


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    x = x.swapaxes(-2, -3)
    *lead, n, heads, dh = x.shape
    return x.reshape(*lead, n, heads * dh)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, w: Dict[str, np.ndarray],
              heads: int) -> Tuple[np.ndarray, dict]:
    """Multi-head scaled dot-product attention.

    Args:
        q: (..., Nq, d) queries.
        k: (..., Nk, d) keys.
        v: (..., Nk, d) values.
        w: Projection matrices 'wq', 'wk', 'wv', 'wo', each (d, d).
        heads: Number of heads; must divide d.

    Returns:
        (..., Nq, d) attended values projected by wo, and the cache. The
        cache's 'weights' entry holds the (..., heads, Nq, Nk) softmax rows.
    """
    qh = _split_heads(q @ w['wq'], heads)
    kh = _split_heads(k @ w['wk'], heads)
    vh = _split_heads(v @ w['wv'], heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    weights = softmax(qh @ kh.swapaxes(-1, -2) * scale)
    merged = _merge_heads(weights @ vh)
    cache = {'q': q, 'k': k, 'v': v, 'qh': qh, 'kh': kh, 'vh': vh,
             'weights': weights, 'merged': merged, 'scale': scale, 'w': w, 'heads': heads}
    return merged @ w['wo'], cache


def attention_backward(dout: np.ndarray, cache: dict) -> Tuple[np.ndarray, np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    w, heads, scale = cache['w'], cache['heads'], cache['scale']

    def outer(x, dy):
        return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])

    grads = {'wo': outer(cache['merged'], dout)}
    dmerged = _split_heads(dout @ w['wo'].T, heads)
    dweights = dmerged @ cache['vh'].swapaxes(-1, -2)
    dvh = cache['weights'].swapaxes(-1, -2) @ dmerged
    dscores = softmax_backward(dweights, cache['weights']) * scale
    dqh = dscores @ cache['kh']
    dkh = dscores.swapaxes(-1, -2) @ cache['qh']

    dq_proj, dk_proj, dv_proj = (_merge_heads(x) for x in (dqh, dkh, dvh))
    grads['wq'] = outer(cache['q'], dq_proj)
    grads['wk'] = outer(cache['k'], dk_proj)
    grads['wv'] = outer(cache['v'], dv_proj)
    return dq_proj @ w['wq'].T, dk_proj @ w['wk'].T, dv_proj @ w['wv'].T, grads

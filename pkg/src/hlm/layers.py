"""Small neural-net building blocks on top of the tensor engine.

Modules hold their parameters as requires_grad Tensors and expose them
through .params() for the optimizer and the checkpoint writer. All
random initialization draws from an explicitly passed numpy Generator,
never from global state.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_normal(rng, shape, std):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def init_zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear:
    """Affine map x @ W + b with W of shape (in_dim, out_dim).

    zero_init puts both W and b at exactly zero (identity-at-start heads).
    """

    def __init__(self, in_dim, out_dim, rng=None, bias=True, zero_init=False, std=None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero_init:
            self.W = init_zeros((in_dim, out_dim))
        else:
            if rng is None:
                raise ValueError("Linear needs an rng unless zero_init")
            self.W = init_normal(rng, (in_dim, out_dim), std if std is not None else in_dim ** -0.5)
        self.b = init_zeros((out_dim,)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.W)
        if self.b is not None:
            y = T.add(y, self.b)
        return y

    def params(self):
        return [self.W] if self.b is None else [self.W, self.b]


class LayerNorm:
    """Last-axis layer normalization with learned affine."""

    def __init__(self, dim, eps=1e-5):
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = init_zeros((dim,))

    def __call__(self, x):
        return T.add(T.mul(T.layer_norm(x, eps=self.eps), self.gamma), self.beta)

    def params(self):
        return [self.gamma, self.beta]


class MLP:
    """Stack of Linear layers with SiLU between (and optionally after)."""

    def __init__(self, dims, rng, final_act=False):
        if len(dims) < 2:
            raise ValueError(f"MLP needs at least input and output dims, got {dims}")
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
        self.final_act = final_act

    def __call__(self, x):
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1 or self.final_act:
                h = T.silu(h)
        return h

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


class MultiheadAttention:
    """Scaled dot-product attention over 3-D (batch, tokens, channels).

    Callers flatten any extra leading axes into the batch axis first;
    self-attention passes the same tensor for queries and context.
    """

    def __init__(self, dim, heads, rng):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split_heads(self, x, n, t):
        x = T.reshape(x, (n, t, self.heads, self.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def __call__(self, x_q, x_kv):
        if x_q.ndim != 3 or x_kv.ndim != 3:
            raise T.ShapeError(f"attention expects 3-D inputs, got {x_q.shape} and {x_kv.shape}")
        n, tq, _ = x_q.shape
        _, tk, _ = x_kv.shape
        q = self._split_heads(self.wq(x_q), n, tq)
        k = self._split_heads(self.wk(x_kv), n, tk)
        v = self._split_heads(self.wv(x_kv), n, tk)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), self.head_dim ** -0.5)
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (n, tq, self.dim))
        return self.wo(out)

    def params(self):
        return self.wq.params() + self.wk.params() + self.wv.params() + self.wo.params()


class Adam:
    """Adam with bias correction and optional global-norm gradient clipping."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.clip_norm is not None:
            total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
            if total > self.clip_norm:
                coef = self.clip_norm / (total + 1e-12)
                grads = [g * coef for g in grads]
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

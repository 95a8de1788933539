"""Style conditioning path: reference latent -> style embedding ->
hypernetwork-generated low-rank FiLM updates.

The style encoder is a per-(frame, joint) MLP stack mean-pooled over
both axes, so the embedding is invariant to frame or joint permutation
and to sequence length. The hypernetwork maps the embedding through a
shared trunk to per-block heads: A-heads randomly initialized, B-heads
zero-initialized, so every generated update starts at exactly zero while
gradients through A keep the product trainable.

The update for block l is dW_l = (alpha/r) B_l A_l folded into that
block's FiLM weight; with the default alpha = r the net scale is one.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import film_generate
from .layers import LayerNorm, Linear, MLP
from .seeding import derive_rng
from .tensor import Tensor


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 4
    alpha: float = 4.0          # matches rank: net update scale 1
    d_style: int = 64
    enc_width: int = 128
    enc_blocks: int = 3
    trunk_width: int = 256

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be positive")
        if min(self.d_style, self.enc_width, self.enc_blocks, self.trunk_width) < 1:
            raise ValueError("adapter dimensions must be positive")


class LoRAFactorSet:
    """Per-FiLM-block factor pairs: A_l (r, D_e), B_l (2 D_h, r); batched
    variants carry a leading item axis. The effective update has matrix
    rank at most r by construction."""

    def __init__(self, factors, rank, alpha):
        self.factors = list(factors)
        self.rank = int(rank)
        self.alpha = float(alpha)
        for a, b in self.factors:
            if a.shape[-2] != self.rank or b.shape[-1] != self.rank:
                raise ValueError(f"factor shapes {a.shape}/{b.shape} disagree with rank {self.rank}")

    def __len__(self):
        return len(self.factors)

    def delta(self, layer_index):
        """(alpha/r) B_l A_l as a Tensor (2 D_h, D_e) or (B, 2 D_h, D_e)."""
        a, b = self.factors[layer_index]
        return T.scale(T.matmul(b, a), self.alpha / self.rank)

    def adapt_films(self, base_films):
        """Fold every delta into the backbone's shared FiLM weights."""
        if len(base_films) != len(self.factors):
            raise ValueError(f"factor set covers {len(self.factors)} blocks, "
                             f"backbone has {len(base_films)}")
        out = []
        for li, (w, bias) in enumerate(base_films):
            d = self.delta(li)
            if d.ndim == 3 and w.ndim == 2:
                w = T.broadcast_axis(T.reshape(w, (1,) + w.shape), 0, d.shape[0])
            out.append((T.add(w, d), bias))
        return out


class StyleEncoder:
    """f: latent (T, J, D) -> embedding (D_s). Each position embeds its own
    channels concatenated with the forward difference to the next latent
    step, so the pooled features keep cross-step dynamics (gait frequency
    would otherwise be invisible after pooling); then per-position MLP
    blocks with layer norm and mean pooling over (T, J)."""

    def __init__(self, d_latent, cfg, rng):
        self.d_latent = d_latent
        self.cfg = cfg
        w = cfg.enc_width
        self.inp = Linear(2 * d_latent, w, rng)
        self.blocks = [(LayerNorm(w), Linear(w, w, rng), Linear(w, w, rng))
                       for _ in range(cfg.enc_blocks)]
        self.out_ln = LayerNorm(w)
        self.out = Linear(w, cfg.d_style, rng)

    def __call__(self, z0):
        if isinstance(z0, np.ndarray):
            z0 = Tensor(z0)
        if z0.shape[-1] != self.d_latent:
            raise ValueError(f"reference channels {z0.shape[-1]} != trained {self.d_latent}")
        if z0.ndim not in (3, 4):
            raise ValueError(f"reference latent must be (T, J, D) or batched, got {z0.shape}")
        squeeze = z0.ndim == 3
        if squeeze:
            z0 = T.reshape(z0, (1,) + z0.shape)
        n = z0.shape[1]
        if n > 1:
            d = T.sub(T.narrow(z0, 1, 1, n - 1), T.narrow(z0, 1, 0, n - 1))
            d = T.concat([d, T.zeros((z0.shape[0], 1) + z0.shape[2:])], axis=1)
        else:
            d = T.zeros(z0.shape)
        h = T.silu(self.inp(T.concat([z0, d], axis=-1)))
        for ln, l1, l2 in self.blocks:
            h = T.add(h, l2(T.silu(l1(ln(h)))))
        pooled = T.mean_pool(h, axes=(-3, -2))
        emb = self.out(self.out_ln(pooled))
        return T.reshape(emb, emb.shape[1:]) if squeeze else emb

    def params(self):
        out = self.inp.params()
        for ln, l1, l2 in self.blocks:
            out += ln.params() + l1.params() + l2.params()
        return out + self.out_ln.params() + self.out.params()


class HyperNetwork:
    """f: style embedding -> per-block (A, B) factors via a shared trunk
    and per-block linear heads; B-heads start at exact zero."""

    def __init__(self, num_blocks, d_embed, d_hidden2, cfg, rng):
        self.cfg = cfg
        self.d_embed = d_embed
        self.d_hidden2 = d_hidden2      # 2 * D_h, rows of each FiLM weight
        self.num_blocks = num_blocks
        r = cfg.rank
        if r > min(d_hidden2, d_embed) // 2:
            raise ValueError(f"rank {r} too large for update {d_hidden2}x{d_embed}")
        self.trunk = MLP([cfg.d_style, cfg.trunk_width, cfg.trunk_width], rng, final_act=True)
        self.a_heads = [Linear(cfg.trunk_width, r * d_embed, rng, std=0.02)
                        for _ in range(num_blocks)]
        self.b_heads = [Linear(cfg.trunk_width, d_hidden2 * r, zero_init=True)
                        for _ in range(num_blocks)]

    def __call__(self, s):
        if isinstance(s, np.ndarray):
            s = Tensor(s)
        if s.shape[-1] != self.cfg.d_style:
            raise ValueError(f"style embedding width {s.shape[-1]} != {self.cfg.d_style}")
        flat = T.reshape(s, (1, s.shape[-1])) if s.ndim == 1 else s
        h = self.trunk(flat)
        r = self.cfg.rank
        lead = s.shape[:-1]
        factors = []
        for ah, bh in zip(self.a_heads, self.b_heads):
            a = T.reshape(ah(h), lead + (r, self.d_embed))
            b = T.reshape(bh(h), lead + (self.d_hidden2, r))
            factors.append((a, b))
        return LoRAFactorSet(factors, r, self.cfg.alpha)

    def params(self):
        out = self.trunk.params()
        for head in self.a_heads + self.b_heads:
            out += head.params()
        return out


def apply_lora_film(e_t, gen, a, b, alpha, rank):
    """(gamma, beta) = split((W + (alpha/r) B A) silu(e_t) + bias)."""
    if a.shape[-1] != gen.W.shape[-1] or b.shape[-2] != gen.W.shape[-2]:
        raise T.ShapeError(f"factors {a.shape}/{b.shape} do not match generator {gen.W.shape}")
    if isinstance(a, np.ndarray):
        a = Tensor(a)
    if isinstance(b, np.ndarray):
        b = Tensor(b)
    w_adapted = T.add(gen.W, T.scale(T.matmul(b, a), alpha / rank))
    phi = T.silu(e_t if isinstance(e_t, Tensor) else Tensor(e_t))
    out = T.add(T.matmul(phi, T.transpose(w_adapted, (1, 0))), gen.b)
    return T.split(out, 2, axis=-1)


class StyleAdapter:
    """Encoder + hypernetwork pair tied to one backbone's geometry."""

    def __init__(self, backbone, cfg=None, seed=0):
        self.cfg = cfg or AdapterConfig()
        self.seed = seed
        self.backbone = backbone
        den = backbone.den_cfg
        rng = derive_rng(seed, "adapter-init")
        self.encoder = StyleEncoder(den.d_latent, self.cfg, rng)
        self.hyper = HyperNetwork(den.num_blocks, den.d_embed, 2 * den.d_hidden,
                                  self.cfg, rng)

    def encode_style(self, z0_ref):
        """Global style embedding of a reference latent (deterministic)."""
        return self.encoder(z0_ref)

    def hyper_lora(self, s):
        """LoRA factor set for a style embedding (deterministic)."""
        return self.hyper(s)

    def precompute_adapted_films(self, s):
        """Materialize W'_l = W_l + (alpha/r) B_l(s) A_l(s) once; the
        returned film stack adds no per-step work inside denoising."""
        with T.no_grad():
            factors = self.hyper_lora(s if isinstance(s, Tensor) else Tensor(s))
            films = factors.adapt_films(self.backbone.base_films())
            return [(w.detach(), bias) for w, bias in films]

    def params(self):
        return self.encoder.params() + self.hyper.params()

    def named_params(self):
        return [(f"adapter.{i}", p) for i, p in enumerate(self.params())]

    def state_dict(self):
        out = {name: p.data.copy() for name, p in self.named_params()}
        out["adapter.__cfg__"] = np.array([
            self.cfg.rank, self.cfg.alpha, self.cfg.d_style, self.cfg.enc_width,
            self.cfg.enc_blocks, self.cfg.trunk_width, self.seed], dtype=np.float64)
        return out

    def load_state_dict(self, state):
        for name, p in self.named_params():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.copy()

    @classmethod
    def from_state_dict(cls, backbone, state):
        raw = np.asarray(state["adapter.__cfg__"])
        cfg = AdapterConfig(rank=int(raw[0]), alpha=float(raw[1]), d_style=int(raw[2]),
                            enc_width=int(raw[3]), enc_blocks=int(raw[4]),
                            trunk_width=int(raw[5]))
        adapter = cls(backbone, cfg, seed=int(raw[6]))
        adapter.load_state_dict(state)
        return adapter

"""Miniature latent motion diffusion backbone.

Two halves:
  - a variational autoencoder that folds 4-frame patches of the 18
    model channels (root velocity + local joints; absolute root position
    is dropped and re-integrated at decode time) into latents shaped
    (T/4, J=4, D=8), and
  - a velocity-predicting denoising transformer over those latents:
    per block temporal self-attention, joint self-attention, text
    cross-attention, and a feedforward whose input is FiLM-modulated by
    the timestep embedding with the (1 + gamma0) convention, so a
    zero-weight generator is exactly the identity.

Text conditioning is a learned embedding table over content ids plus a
reserved null token for the unconditional branch.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Adam, LayerNorm, Linear, MLP, MultiheadAttention
from .motion import FEATURE_DIM
from .schedule import forward_diffuse, target_velocity
from .seeding import derive_rng
from .tensor import Tensor

MODEL_CHANNELS = 18    # [vel_x, vel_y] + 8 joints * (dx, z)


class TrainingDiverged(RuntimeError):
    def __init__(self, stage, epoch, step, value):
        super().__init__(f"{stage} diverged at epoch {epoch}, step {step}: loss {value}")
        self.stage = stage
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class VAEConfig:
    patch: int = 4
    width: int = 128
    j_latent: int = 4
    d_latent: int = 8
    kl_weight: float = 1e-4

    def __post_init__(self):
        if min(self.patch, self.width, self.j_latent, self.d_latent) < 1:
            raise ValueError("VAE dimensions must be positive")

    @property
    def latent_width(self):
        return self.j_latent * self.d_latent


@dataclass(frozen=True)
class DenoiserConfig:
    num_blocks: int = 4
    d_hidden: int = 64
    heads: int = 2
    d_latent: int = 8
    j_latent: int = 4
    d_embed: int = 64
    d_text: int = 64
    text_dropout: float = 0.1

    def __post_init__(self):
        if min(self.num_blocks, self.d_hidden, self.heads, self.d_latent,
               self.j_latent, self.d_embed, self.d_text) < 1:
            raise ValueError("denoiser dimensions must be positive")
        if not (0.0 <= self.text_dropout < 1.0):
            raise ValueError(f"text_dropout must be in [0, 1), got {self.text_dropout}")
        if self.d_text != self.d_hidden or self.d_embed != self.d_hidden:
            raise ValueError("context widths must equal d_hidden (single-width attention)")


@dataclass(frozen=True)
class TextCondition:
    """content_id string, or None for the reserved null token."""
    content_id: object = None


@dataclass
class FiLMGenerator:
    """Produces (gamma0, beta0) = split(W silu(e_t) + b) for one block."""
    W: Tensor
    b: Tensor
    layer_index: int

    def params(self):
        return [self.W, self.b]


def film_generate(e_t, gen):
    """(gamma0, beta0), each width D_h, from a (B, D_e) timestep embedding."""
    d2, d_e = gen.W.shape
    if e_t.shape[-1] != d_e:
        raise T.ShapeError(f"timestep embedding width {e_t.shape[-1]} != generator D_e {d_e}")
    out = T.add(T.matmul(T.silu(e_t), T.transpose(gen.W, (1, 0))), gen.b)
    return T.split(out, 2, axis=-1)


def film_modulate(h, gamma, beta):
    """Elementwise affine h' = gamma (.) h + beta over the channel axis."""
    if gamma.shape != h.shape or beta.shape != h.shape:
        raise T.ShapeError(
            f"FiLM shapes {gamma.shape}/{beta.shape} must match features {h.shape}")
    return T.add(T.mul(gamma, h), beta)


def kl_divergence(mean, logvar):
    """KL(q || N(0, I)) summed over latent dims, averaged over leading axis."""
    m = np.asarray(mean, dtype=np.float64)
    lv = np.asarray(logvar, dtype=np.float64)
    per = -0.5 * (1.0 + lv - m * m - np.exp(lv))
    return float(per.reshape(per.shape[0], -1).sum(axis=1).mean())


def sinusoidal_embedding(t, dim):
    """Classic sin/cos features of integer timesteps; shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def motion_to_model_features(frames):
    """(T, 20) file frames -> (T, 18) model channels [vel, joints]."""
    f = np.asarray(frames, dtype=np.float64)
    if f.shape[-1] != FEATURE_DIM:
        raise ValueError(f"expected {FEATURE_DIM} channels, got {f.shape[-1]}")
    return np.concatenate([f[..., 18:20], f[..., 2:18]], axis=-1)


def model_features_to_frames(feats, fps):
    """Invert the channel map; re-integrates the root path from velocity
    and re-derives the stored velocity from quantized positions so the
    output satisfies the dataset's displacement identity."""
    feats = np.asarray(feats, dtype=np.float64)
    vel = feats[:, 0:2]
    joints = feats[:, 2:18]
    pos = np.zeros_like(vel)
    pos[1:] = np.cumsum(vel[1:] / fps, axis=0)
    pos32 = pos.astype(np.float32)
    out_vel = np.zeros_like(pos)
    out_vel[1:] = (pos32[1:].astype(np.float64) - pos32[:-1].astype(np.float64)) * fps
    if len(out_vel) > 1:
        out_vel[0] = out_vel[1]
    frames = np.zeros((feats.shape[0], FEATURE_DIM), dtype=np.float32)
    frames[:, 0:2] = pos32
    frames[:, 2:18] = joints.astype(np.float32)
    frames[:, 18:20] = out_vel.astype(np.float32)
    return frames


class Backbone:
    """Holds VAE + denoiser parameters, the feature normalizer, and the
    content vocabulary. Weights are plain Tensors registered by name."""

    def __init__(self, content_ids, vae_cfg=None, den_cfg=None, seed=0):
        self.vae_cfg = vae_cfg or VAEConfig()
        self.den_cfg = den_cfg or DenoiserConfig()
        if self.vae_cfg.j_latent != self.den_cfg.j_latent or \
           self.vae_cfg.d_latent != self.den_cfg.d_latent:
            raise ValueError("VAE and denoiser disagree on latent shape")
        self.content_ids = list(content_ids)
        self.null_index = len(self.content_ids)
        self.seed = seed
        c = self.den_cfg
        v = self.vae_cfg

        r = derive_rng(seed, "backbone-init")
        in_w = v.patch * MODEL_CHANNELS
        self.enc = MLP([in_w, v.width, v.width], r, final_act=True)
        self.enc_mean = Linear(v.width, v.latent_width, r)
        self.enc_logvar = Linear(v.width, v.latent_width, r, std=1e-3)
        # start with tight posteriors: at logvar 0 the posterior noise would
        # dwarf the signal once latents are rescaled to unit variance
        self.enc_logvar.b.data[:] = -6.0
        self.dec = MLP([v.latent_width, v.width, v.width], r, final_act=True)
        self.dec_out = Linear(v.width, in_w, r)

        self.in_proj = Linear(c.d_latent, c.d_hidden, r)
        self.joint_pos = Tensor(r.normal(0.0, 0.02, size=(c.j_latent, c.d_hidden)),
                                requires_grad=True)
        self.time_mlp = MLP([c.d_embed, c.d_embed, c.d_embed], r)
        self.text_table = Tensor(r.normal(0.0, 0.02, size=(len(self.content_ids) + 1, c.d_text)),
                                 requires_grad=True)
        self.blocks = []
        for li in range(c.num_blocks):
            self.blocks.append({
                "ln_t": LayerNorm(c.d_hidden), "attn_t": MultiheadAttention(c.d_hidden, c.heads, r),
                "ln_j": LayerNorm(c.d_hidden), "attn_j": MultiheadAttention(c.d_hidden, c.heads, r),
                "ln_x": LayerNorm(c.d_hidden), "attn_x": MultiheadAttention(c.d_hidden, c.heads, r),
                "ln_f": LayerNorm(c.d_hidden),
                "film": FiLMGenerator(
                    Tensor(r.normal(0.0, 0.02, size=(2 * c.d_hidden, c.d_embed)),
                           requires_grad=True),
                    Tensor(np.zeros(2 * c.d_hidden), requires_grad=True), li),
                "ff1": Linear(c.d_hidden, 2 * c.d_hidden, r),
                "ff2": Linear(2 * c.d_hidden, c.d_hidden, r),
            })
        self.out_ln = LayerNorm(c.d_hidden)
        self.out_proj = Linear(c.d_hidden, c.d_latent, zero_init=True)

        # feature normalizer and latent scale, fitted during pretraining
        self.feat_mean = np.zeros(MODEL_CHANNELS)
        self.feat_std = np.ones(MODEL_CHANNELS)
        self.latent_scale = 1.0
        self._pos_cache = {}

    # -- parameter registry -------------------------------------------

    def vae_params(self):
        out = []
        for name, mod in [("enc", self.enc), ("enc_mean", self.enc_mean),
                          ("enc_logvar", self.enc_logvar), ("dec", self.dec),
                          ("dec_out", self.dec_out)]:
            for i, p in enumerate(mod.params()):
                out.append((f"vae.{name}.{i}", p))
        return out

    def denoiser_params(self):
        out = [("den.in_proj.0", self.in_proj.W), ("den.in_proj.1", self.in_proj.b),
               ("den.joint_pos", self.joint_pos), ("den.text_table", self.text_table)]
        for i, p in enumerate(self.time_mlp.params()):
            out.append((f"den.time_mlp.{i}", p))
        for li, blk in enumerate(self.blocks):
            for key in ("ln_t", "attn_t", "ln_j", "attn_j", "ln_x", "attn_x",
                        "ln_f", "film", "ff1", "ff2"):
                for i, p in enumerate(blk[key].params()):
                    out.append((f"den.block{li}.{key}.{i}", p))
        for i, p in enumerate(self.out_ln.params()):
            out.append((f"den.out_ln.{i}", p))
        out.append(("den.out_proj.0", self.out_proj.W))
        out.append(("den.out_proj.1", self.out_proj.b))
        return out

    def named_params(self):
        return self.vae_params() + self.denoiser_params()

    # -- VAE ----------------------------------------------------------

    def _check_width(self, frames):
        if frames.shape[-1] != FEATURE_DIM:
            raise ValueError(f"feature width {frames.shape[-1]} != trained width {FEATURE_DIM}")
        if frames.shape[-2] % self.vae_cfg.patch != 0:
            raise ValueError(f"T={frames.shape[-2]} not divisible by patch {self.vae_cfg.patch}")

    def _normalize(self, feats):
        return (feats - self.feat_mean) / self.feat_std

    def _denormalize(self, feats):
        return feats * self.feat_std + self.feat_mean

    def _encode_stats(self, frames):
        """Posterior (mean, logvar) with shape (..., T/4, J, D); tape-free."""
        self._check_width(frames)
        v = self.vae_cfg
        feats = self._normalize(motion_to_model_features(frames))
        lead = feats.shape[:-2]
        t_lat = feats.shape[-2] // v.patch
        patches = feats.reshape(lead + (t_lat, v.patch * MODEL_CHANNELS))
        with T.no_grad():
            h = self.enc(Tensor(patches))
            mean = self.enc_mean(h).data
            logvar = self.enc_logvar(h).data
        shape = lead + (t_lat, v.j_latent, v.d_latent)
        return mean.reshape(shape), np.clip(logvar, -12.0, 12.0).reshape(shape)

    def vae_encode(self, frames, sample=False, rng=None):
        """(mean, logvar, z0): z0 is the reparameterized draw when sample
        is set (needs an rng), else the posterior mean; scaled into the
        diffusion latent space."""
        mean, logvar = self._encode_stats(frames)
        if sample:
            if rng is None:
                raise ValueError("sampling the posterior requires an rng")
            z0 = mean + np.exp(0.5 * logvar) * rng.normal(size=mean.shape)
        else:
            z0 = mean
        return mean, logvar, z0 / self.latent_scale

    def vae_decode(self, z0, fps=20.0):
        """Latent (T/4, J, D) -> file frames (T, 20); deterministic."""
        z = np.asarray(z0, dtype=np.float64) * self.latent_scale
        v = self.vae_cfg
        if z.shape[-2:] != (v.j_latent, v.d_latent):
            raise ValueError(f"latent shaped {z.shape}, expected (*, {v.j_latent}, {v.d_latent})")
        lead = z.shape[:-3]
        t_lat = z.shape[-3]
        flat = z.reshape(lead + (t_lat, v.latent_width))
        with T.no_grad():
            feats = self.dec_out(self.dec(Tensor(flat))).data
        feats = self._denormalize(feats.reshape(lead + (t_lat * v.patch, MODEL_CHANNELS)))
        if lead:
            return np.stack([model_features_to_frames(f, fps) for f in feats])
        return model_features_to_frames(feats, fps)

    def decode_features(self, z0_tensor):
        """Differentiable decode to normalized model features (Tensor in,
        Tensor out, shape (..., T, 18)); constraint losses hook in here."""
        v = self.vae_cfg
        lead = z0_tensor.shape[:-3]
        t_lat = z0_tensor.shape[-3]
        z = T.scale(z0_tensor, self.latent_scale)
        flat = T.reshape(z, lead + (t_lat, v.latent_width))
        feats = self.dec_out(self.dec(flat))
        return T.reshape(feats, lead + (t_lat * v.patch, MODEL_CHANNELS))

    # -- conditioning -------------------------------------------------

    def content_index(self, cond):
        """Vocabulary index for a TextCondition or plain content id string."""
        cid = cond.content_id if isinstance(cond, TextCondition) else cond
        if cond is None or cid is None:
            return self.null_index
        try:
            return self.content_ids.index(cid)
        except ValueError:
            raise ValueError(f"unknown content id {cid!r}; "
                             f"vocabulary: {self.content_ids}") from None

    def text_embedding(self, indices):
        return T.index_select(self.text_table, np.atleast_1d(indices), axis=0)

    def timestep_embedding(self, t):
        """Deterministic e_t (B, D_e) from integer timesteps."""
        sin = sinusoidal_embedding(t, self.den_cfg.d_embed)
        return self.time_mlp(Tensor(sin))

    def _positions(self, t_lat):
        if t_lat not in self._pos_cache:
            pos = sinusoidal_embedding(np.arange(t_lat), self.den_cfg.d_hidden)
            self._pos_cache[t_lat] = pos[:, None, :]   # (T, 1, C)
        return self._pos_cache[t_lat]

    def base_films(self):
        """Per-block shared FiLM parameter pairs (W, b)."""
        return [(blk["film"].W, blk["film"].b) for blk in self.blocks]

    # -- denoiser -----------------------------------------------------

    def denoise(self, z_t, t, cond=None, lora=None, films=None):
        """v_hat for latents z_t (B, T, J, D) at integer timestep(s) t.

        cond is a TextCondition (None = null token) or an index array of
        per-item rows into the embedding table. films overrides the FiLM
        parameters per block (the adapted-path hook); lora is a factor
        set whose deltas are folded into the shared FiLM weights here.
        """
        if films is not None and lora is not None:
            raise ValueError("pass either lora factors or prebuilt films, not both")
        if films is None:
            films = self.base_films()
            if lora is not None:
                films = lora.adapt_films(films)
        if len(films) != len(self.blocks):
            raise ValueError(f"film stack has {len(films)} entries for "
                             f"{len(self.blocks)} blocks")
        squeeze = False
        if isinstance(z_t, np.ndarray):
            z_t = Tensor(z_t)
        if z_t.ndim == 3:
            z_t = T.reshape(z_t, (1,) + z_t.shape)
            squeeze = True
        b, t_lat, j, d = z_t.shape
        if cond is None or isinstance(cond, TextCondition):
            idx = np.full(b, self.content_index(cond))
        else:
            idx = np.asarray(cond)
        t_arr = np.full(b, t) if np.ndim(t) == 0 else np.asarray(t)

        c_emb = self.text_embedding(idx)                     # (B, C)
        e_t = self.timestep_embedding(t_arr)                 # (B, C)
        ctx = T.concat([T.reshape(c_emb, (b, 1, -1)), T.reshape(e_t, (b, 1, -1))], axis=1)

        h = self.in_proj(z_t)                                # (B, T, J, C)
        pos = Tensor(np.broadcast_to(self._positions(t_lat), (t_lat, j, h.shape[-1])).copy())
        h = T.add(h, T.broadcast_axis(T.reshape(pos, (1, t_lat, j, -1)), 0, b))
        jp = T.broadcast_axis(T.reshape(self.joint_pos, (1, 1, j, -1)), 0, b)
        h = T.add(h, T.broadcast_axis(jp, 1, t_lat))

        c = h.shape[-1]
        n = t_lat * j
        for blk, (f_w, f_b) in zip(self.blocks, films):
            x = blk["ln_t"](h)
            x = T.reshape(T.transpose(x, (0, 2, 1, 3)), (b * j, t_lat, c))
            x = blk["attn_t"](x, x)
            x = T.transpose(T.reshape(x, (b, j, t_lat, c)), (0, 2, 1, 3))
            h = T.add(h, x)

            x = T.reshape(blk["ln_j"](h), (b * t_lat, j, c))
            x = blk["attn_j"](x, x)
            h = T.add(h, T.reshape(x, (b, t_lat, j, c)))

            x = T.reshape(blk["ln_x"](h), (b, n, c))
            x = blk["attn_x"](x, ctx)
            h = T.add(h, T.reshape(x, (b, t_lat, j, c)))

            gamma0, beta0 = self._film_from(e_t, f_w, f_b, b)
            ff_in = T.reshape(blk["ln_f"](h), (b, n, c))
            ff_in = film_modulate(ff_in,
                                  T.broadcast_axis(T.reshape(gamma0 + 1.0, (b, 1, c)), 1, n),
                                  T.broadcast_axis(T.reshape(beta0, (b, 1, c)), 1, n))
            x = blk["ff2"](T.silu(blk["ff1"](ff_in)))
            h = T.add(h, T.reshape(x, (b, t_lat, j, c)))

        out = self.out_proj(self.out_ln(h))
        return T.reshape(out, (t_lat, j, d)) if squeeze else out

    @staticmethod
    def _film_from(e_t, f_w, f_b, batch):
        """FiLM halves from shared (2C, D_e) or per-item (B, 2C, D_e)
        weights. Shared weights are expanded so both cases run the same
        batched matmul; identical inputs then give identical bits."""
        phi = T.silu(e_t)
        if f_w.ndim == 2:
            f_w = T.broadcast_axis(T.reshape(f_w, (1,) + f_w.shape), 0, batch)
        if f_w.ndim != 3 or f_w.shape[0] != batch:
            raise T.ShapeError(f"film weights {f_w.shape} unusable for batch {batch}")
        prod = T.matmul(T.reshape(phi, (batch, 1, -1)), T.transpose(f_w, (0, 2, 1)))
        out = T.reshape(prod, (batch, f_w.shape[1]))
        if f_b.ndim == 1:
            out = T.add(out, f_b)
        else:
            out = T.add(out, T.reshape(f_b, out.shape))
        return T.split(out, 2, axis=-1)

    # -- persistence --------------------------------------------------

    def state_dict(self):
        out = {name: p.data.copy() for name, p in self.named_params()}
        out["norm.mean"] = self.feat_mean.copy()
        out["norm.std"] = self.feat_std.copy()
        out["norm.latent_scale"] = np.asarray(self.latent_scale)
        meta = json.dumps({
            "content_ids": self.content_ids, "seed": self.seed,
            "vae_cfg": vars(self.vae_cfg) if not hasattr(self.vae_cfg, "__dataclass_fields__")
                       else {k: getattr(self.vae_cfg, k) for k in self.vae_cfg.__dataclass_fields__},
            "den_cfg": {k: getattr(self.den_cfg, k) for k in self.den_cfg.__dataclass_fields__},
        }, sort_keys=True)
        out["__meta__"] = np.frombuffer(meta.encode("utf-8"), dtype=np.uint8).astype(np.float64)
        return out

    def load_state_dict(self, state):
        for name, p in self.named_params():
            if name not in state:
                raise ValueError(f"checkpoint missing parameter {name}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.copy()
        self.feat_mean = np.asarray(state["norm.mean"], dtype=np.float64)
        self.feat_std = np.asarray(state["norm.std"], dtype=np.float64)
        self.latent_scale = float(state["norm.latent_scale"])

    @staticmethod
    def meta_from_state(state):
        raw = np.asarray(state["__meta__"]).astype(np.uint8).tobytes()
        return json.loads(raw.decode("utf-8"))

    @classmethod
    def from_state_dict(cls, state):
        meta = cls.meta_from_state(state)
        bb = cls(meta["content_ids"], VAEConfig(**meta["vae_cfg"]),
                 DenoiserConfig(**meta["den_cfg"]), seed=meta["seed"])
        bb.load_state_dict(state)
        return bb


# -- pretraining ------------------------------------------------------

def _length_buckets(sequences):
    buckets = {}
    for i, s in enumerate(sequences):
        buckets.setdefault(s.num_frames, []).append(i)
    return buckets


def _batches(buckets, batch_size, rng):
    """Equal-length batches, order shuffled across and within buckets."""
    order = []
    for t, idxs in sorted(buckets.items()):
        perm = rng.permutation(len(idxs))
        for k in range(0, len(idxs), batch_size):
            order.append([idxs[p] for p in perm[k:k + batch_size]])
    rng.shuffle(order)
    return order


def pretrain_backbone(dataset, vae_cfg=None, den_cfg=None, sched=None, seed=0,
                      vae_epochs=14, den_epochs=30, batch_size=32,
                      vae_lr=1e-3, den_lr=3e-4, log=None):
    """Train the VAE, fit the latent scale, then train the denoiser with
    velocity regression and text dropout. Returns (backbone, history);
    history rows carry per-epoch mean losses and the measured null-token
    fraction. Non-finite losses abort with the failing epoch and step."""
    from .schedule import make_schedule
    sched = sched or make_schedule()
    train = dataset.split("train")
    if not train:
        raise ValueError("dataset has no training split")
    bb = Backbone(dataset.content_ids, vae_cfg, den_cfg, seed=seed)

    feats = np.concatenate([motion_to_model_features(s.frames) for s in train])
    bb.feat_mean = feats.mean(axis=0)
    bb.feat_std = feats.std(axis=0) + 1e-6

    v = bb.vae_cfg
    buckets = _length_buckets(train)
    history = []

    params = [p for _, p in bb.vae_params()]
    opt = Adam(params, lr=vae_lr)
    rng = derive_rng(seed, "pretrain-vae")
    for epoch in range(vae_epochs):
        losses = []
        for step, batch in enumerate(_batches(buckets, batch_size, rng)):
            x = np.stack([bb._normalize(motion_to_model_features(train[i].frames))
                          for i in batch])
            bsz, t_frames, _ = x.shape
            patches = Tensor(x.reshape(bsz, t_frames // v.patch, v.patch * MODEL_CHANNELS))
            h = bb.enc(patches)
            mean = bb.enc_mean(h)
            logvar = bb.enc_logvar(h)
            eps = rng.normal(size=mean.shape)
            z = T.add(mean, T.mul(T.exp(T.scale(logvar, 0.5)), Tensor(eps)))
            recon = bb.dec_out(bb.dec(z))
            rec_loss = T.mse(recon, patches.detach())
            kl = T.scale(T.sum_reduce(
                T.scale(T.add(T.sub(T.mul(mean, mean), logvar), T.exp(logvar)) + (-1.0), 0.5)),
                1.0 / bsz)
            loss = T.add(rec_loss, T.scale(kl, v.kl_weight))
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingDiverged("vae", epoch, step, val)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            losses.append(val)
        row = {"stage": "vae", "epoch": epoch, "loss": float(np.mean(losses))}
        history.append(row)
        if log:
            log(row)

    # fit the latent scale so diffusion sees roughly unit-variance latents
    means = [bb._encode_stats(s.frames)[0] for s in train[::4]]
    bb.latent_scale = float(np.std(np.concatenate([m.reshape(-1) for m in means]))) or 1.0

    params = [p for _, p in bb.denoiser_params()]
    opt = Adam(params, lr=den_lr)
    rng = derive_rng(seed, "pretrain-den")
    content_of = {s: i for i, s in enumerate(dataset.content_ids)}
    for epoch in range(den_epochs):
        losses = []
        null_count = 0
        total = 0
        for step, batch in enumerate(_batches(buckets, batch_size, rng)):
            frames = np.stack([train[i].frames for i in batch])
            # mean encodings: posterior sampling belongs to the first stage,
            # and early in training its noise would drown the signal
            _, _, z0 = bb.vae_encode(frames)
            bsz = z0.shape[0]
            t_draw = rng.integers(1, sched.num_steps + 1, size=bsz)
            eps = rng.normal(size=z0.shape)
            z_t = forward_diffuse(sched, z0, t_draw, eps)
            v_tgt = target_velocity(sched, z0, t_draw, eps)
            idx = np.array([content_of[train[i].content_id] for i in batch])
            drop = rng.random(bsz) < bb.den_cfg.text_dropout
            idx[drop] = bb.null_index
            null_count += int(drop.sum())
            total += bsz
            v_hat = bb.denoise(z_t, t_draw, cond=idx)
            loss = T.mse(v_hat, Tensor(v_tgt))
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingDiverged("denoiser", epoch, step, val)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            losses.append(val)
        row = {"stage": "denoiser", "epoch": epoch, "loss": float(np.mean(losses)),
               "null_fraction": null_count / max(1, total)}
        history.append(row)
        if log:
            log(row)
    return bb, history

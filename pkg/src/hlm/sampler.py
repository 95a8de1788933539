"""Inference. Three-branch classifier-free guidance (unconditional, text,
text + style adapter), gradient guidance from the style encoder on the noisy
latent, motion-space constraint guidance, and inversion-based style transfer.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import motion as mo
from . import tensor as T
from .render import render_svg
from .schedule import (DEFAULT_SAMPLE_STEPS, ddim_invert_step, ddim_step,
                       recover_clean, step_grid)
from .seeding import derive_rng
from .tensor import Tensor


@dataclass
class GuidanceConfig:
    w_text: float = 7.5
    w_style: float = 1.5
    lambda_style: float = 0.75
    eps_stab: float = 1e-8
    backprop_mode: str = "full"             # or "frozen-velocity"
    timestep_range: tuple = None            # (lo, hi) in t units, default full

    def __post_init__(self):
        for name in ("w_text", "w_style", "lambda_style"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.eps_stab <= 0:
            raise ValueError(f"eps_stab must be positive, got {self.eps_stab}")
        if self.backprop_mode not in ("full", "frozen-velocity"):
            raise ValueError(f"unknown backprop mode {self.backprop_mode!r}")
        if self.timestep_range is not None:
            lo, hi = self.timestep_range
            if lo > hi:
                raise ValueError(f"empty timestep range {self.timestep_range}")
            self.timestep_range = (int(lo), int(hi))

    def active_at(self, t):
        if self.timestep_range is None:
            return True
        lo, hi = self.timestep_range
        return lo <= t <= hi


@dataclass
class ConstraintSpec:
    """Motion-space guidance target.

    trajectory: targets is a per-frame root path (T, 2).
    keyframe:   targets is a list of (frame_index, pose) pairs where pose is
                a raw feature row (20,); the joint channels are constrained,
                global placement is the trajectory constraint's job.
    """
    kind: str
    targets: object
    weight: float = 1.0
    step_size: float = 0.3

    def __post_init__(self):
        if self.kind not in ("trajectory", "keyframe"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "trajectory":
            path = np.asarray(self.targets, dtype=np.float64)
            if path.ndim != 2 or path.shape[1] != 2:
                raise ValueError(f"trajectory targets must be (T, 2), got {path.shape}")
            self.targets = path
        else:
            pairs = []
            for frame, pose in self.targets:
                pose = np.asarray(pose, dtype=np.float64)
                if pose.shape != (mo.FEATURE_DIM,):
                    raise ValueError(f"keyframe pose must be ({mo.FEATURE_DIM},), "
                                     f"got {pose.shape}")
                if frame < 0:
                    raise ValueError(f"negative keyframe index {frame}")
                pairs.append((int(frame), pose))
            self.targets = pairs

    def check_length(self, length):
        if self.kind == "trajectory":
            if len(self.targets) != length:
                raise ValueError(f"trajectory target covers {len(self.targets)} "
                                 f"frames, sequence has {length}")
        else:
            for frame, _ in self.targets:
                if frame >= length:
                    raise ValueError(f"keyframe {frame} outside sequence of length {length}")


def cfg_combine(v_uncond, v_text, v_style, w_text, w_style):
    """v_hat = v_uncond + w_text (v_text - v_uncond) + w_style (v_style - v_text).

    Computed anchored at v_text, so (w_text, w_style) = (1, 0) returns v_text
    exactly and w_style = 0 drops the style branch entirely.
    """
    vu = v_uncond if isinstance(v_uncond, Tensor) else Tensor(v_uncond)
    vt = v_text if isinstance(v_text, Tensor) else Tensor(v_text)
    if vu.shape != vt.shape:
        raise T.ShapeError(f"branch shapes differ: {vu.shape} vs {vt.shape}")
    out = vt
    if w_text != 1.0:
        out = T.add(out, T.scale(T.sub(vt, vu), w_text - 1.0))
    if w_style != 0.0:
        if v_style is None:
            raise ValueError("w_style != 0 requires a style branch")
        vs = v_style if isinstance(v_style, Tensor) else Tensor(v_style)
        if vs.shape != vt.shape:
            raise T.ShapeError(f"branch shapes differ: {vs.shape} vs {vt.shape}")
        out = T.add(out, T.scale(T.sub(vs, vt), w_style))
    return out


def _per_item_norm(g):
    flat = g.reshape(g.shape[0], -1)
    return np.linalg.norm(flat, axis=1).reshape((-1,) + (1,) * (g.ndim - 1))


def style_guidance_step(adapter, sched, z_leaf, v_hat, s_ref, t, cfg):
    """One normalized gradient step on the noisy latent toward the reference
    style embedding. Returns (new z array, info).

    z_leaf must be the grad-enabled Tensor the branches were computed from
    when backprop_mode is "full"; in "frozen-velocity" mode v_hat is treated
    as a constant and only the alpha_t z_t term carries gradient.
    """
    lam = cfg.lambda_style
    if lam == 0.0:
        return z_leaf.data, {"applied": False}
    v_used = v_hat if cfg.backprop_mode == "full" else v_hat.detach()
    zhat0 = recover_clean(sched, z_leaf, t, v_used)
    s_hat = adapter.encode_style(zhat0)
    ref = s_ref if isinstance(s_ref, Tensor) else Tensor(s_ref)
    diff = T.sub(s_hat, ref)
    loss = T.sum_reduce(T.mul(diff, diff))
    per_item = np.sum((s_hat.data - ref.data) ** 2, axis=-1)
    T.backward(loss)
    g = z_leaf.grad
    z_leaf.grad = None
    if g is None or not np.all(np.isfinite(g)):
        return z_leaf.data, {"applied": False, "skipped": "non-finite gradient",
                             "style_loss": per_item.tolist()}
    norms = _per_item_norm(g)
    z_new = z_leaf.data - lam * g / (norms + cfg.eps_stab)
    return z_new, {"applied": True, "style_loss": per_item.tolist(),
                   "grad_norm": norms.ravel().tolist()}


def _constraint_loss(backbone, feats, spec, fps):
    """Loss of one constraint on decoded, denormalized model features."""
    std, mean = backbone.feat_std, backbone.feat_mean
    if spec.kind == "trajectory":
        vel = T.add(T.mul(T.narrow(feats, -1, 0, 2), Tensor(std[0:2])),
                    Tensor(mean[0:2]))
        n = feats.shape[-2]
        # decode integrates the root from vel[1:] with pos[0] = 0
        disp = T.scale(T.narrow(vel, -2, 1, n - 1), 1.0 / fps)
        path = T.concat([Tensor(np.zeros(feats.shape[:-2] + (1, 2))),
                         T.cumsum(disp, axis=-2)], axis=-2)
        target = np.broadcast_to(spec.targets, path.shape).copy()
        return T.mse(path, Tensor(target))
    frames = np.array([f for f, _ in spec.targets], dtype=np.int64)
    poses = np.stack([p[2:18] for _, p in spec.targets])
    sel = T.index_select(feats, frames, axis=feats.ndim - 2)
    joints = T.add(T.mul(T.narrow(sel, -1, 2, 16), Tensor(std[2:18])),
                   Tensor(mean[2:18]))
    target = np.broadcast_to(poses, joints.shape).copy()
    return T.mse(joints, Tensor(target))


def _apply_constraints(backbone, sched, z, v_data, t, constraints, fps,
                       eps, consts, row):
    """Per-constraint normalized gradient steps on the decoded motion,
    velocity held constant."""
    for spec in constraints:
        if spec.weight == 0.0 or spec.step_size == 0.0:
            continue
        with T.frozen(consts):
            z_leaf = Tensor(z, requires_grad=True)
            zhat0 = recover_clean(sched, z_leaf, t, Tensor(v_data))
            feats = backbone.decode_features(zhat0)
            loss = T.scale(_constraint_loss(backbone, feats, spec, fps), spec.weight)
            T.backward(loss)
        g = z_leaf.grad
        if g is None or not np.all(np.isfinite(g)):
            row.setdefault("constraints", {})[spec.kind] = {"skipped": "non-finite gradient"}
            continue
        norms = _per_item_norm(g)
        z = z - spec.step_size * g / (norms + eps)
        row.setdefault("constraints", {})[spec.kind] = {
            "loss": float(loss.item()), "grad_norm": norms.ravel().tolist()}
    return z


def _sample_core(backbone, adapter, sched, content_idx, films, s_ref, guidance,
                 z_init, grid, fps, constraints=()):
    """Reverse diffusion over a step grid. Returns (z0, per-step trace)."""
    z = np.asarray(z_init, dtype=np.float64)
    batch = z.shape[0]
    cond = np.full(batch, content_idx)
    null = np.full(batch, backbone.null_index)
    consts = [p for _, p in backbone.named_params()]
    if adapter is not None:
        consts = consts + adapter.params()
    style_on = films is not None
    trace = []
    for i in range(len(grid) - 1):
        t_hi, t_lo = int(grid[i]), int(grid[i + 1])
        guide_now = (style_on and s_ref is not None
                     and guidance.lambda_style != 0.0 and guidance.active_at(t_hi))
        need_graph = guide_now and guidance.backprop_mode == "full"
        row = {"t": t_hi}
        with T.frozen(consts):
            if need_graph:
                z_leaf = Tensor(z, requires_grad=True)
                v_u = backbone.denoise(z_leaf, t_hi, cond=null)
                v_t = backbone.denoise(z_leaf, t_hi, cond=cond)
                v_s = backbone.denoise(z_leaf, t_hi, cond=cond, films=films)
                v_hat = cfg_combine(v_u, v_t, v_s, guidance.w_text, guidance.w_style)
            else:
                with T.no_grad():
                    zt = Tensor(z)
                    v_u = backbone.denoise(zt, t_hi, cond=null)
                    v_t = backbone.denoise(zt, t_hi, cond=cond)
                    v_s = (backbone.denoise(zt, t_hi, cond=cond, films=films)
                           if style_on and guidance.w_style != 0.0 else None)
                    v_hat = cfg_combine(v_u, v_t, v_s, guidance.w_text,
                                        guidance.w_style)
            if guide_now:
                if not need_graph:
                    z_leaf = Tensor(z, requires_grad=True)
                z, info = style_guidance_step(adapter, sched, z_leaf, v_hat,
                                              s_ref, t_hi, guidance)
                row["style"] = info
        v_data = v_hat.data
        if constraints:
            z = _apply_constraints(backbone, sched, z, v_data, t_hi, constraints,
                                   fps, guidance.eps_stab, consts, row)
        z = ddim_step(sched, z, t_hi, t_lo, v_data)
        trace.append(row)
    return z, trace


def _encode_reference(backbone, adapter, style_ref):
    _, _, z0 = backbone.vae_encode(style_ref.frames)
    with T.no_grad():
        s = adapter.encode_style(Tensor(z0))
    films = adapter.precompute_adapted_films(s)
    return s.data, films


def _check_length(backbone, length):
    patch = backbone.vae_cfg.patch
    if length < 16 or length % patch:
        raise ValueError(f"length must be >= 16 and a multiple of {patch}, got {length}")


def sample(backbone, adapter, sched, prompt, style_ref=None, length=64,
           guidance=None, seed=0, n_steps=DEFAULT_SAMPLE_STEPS,
           fps=mo.DEFAULT_FPS, constraints=()):
    """Generate one motion for a content prompt, optionally styled by a
    reference sequence. Returns (MotionSequence, sidecar dict)."""
    guidance = guidance or GuidanceConfig()
    _check_length(backbone, length)
    idx = backbone.content_index(prompt)
    films = s_ref = None
    if style_ref is not None:
        if adapter is None:
            raise ValueError("styled sampling needs an adapter")
        s, films = _encode_reference(backbone, adapter, style_ref)
        s_ref = s[None, :]
    elif guidance.w_style != 0.0 or guidance.lambda_style != 0.0:
        raise ValueError("style guidance requires a style reference; "
                         "set w_style and lambda_style to 0 to sample without one")
    for spec in constraints:
        spec.check_length(length)
    rng = derive_rng(seed, "sample-init")
    v = backbone.vae_cfg
    z = rng.normal(size=(1, length // v.patch, v.j_latent, v.d_latent))
    grid = step_grid(sched, n_steps)
    z0, trace = _sample_core(backbone, adapter, sched, idx, films, s_ref,
                             guidance, z, grid, fps, constraints)
    frames = backbone.vae_decode(z0, fps)[0]
    motion = mo.MotionSequence(frames, fps, prompt,
                               style_ref.style_id if style_ref else "unstyled",
                               "generated")
    sidecar = {"seed": seed, "prompt": prompt,
               "style_ref": style_ref.style_id if style_ref else None,
               "length": length, "n_steps": n_steps,
               "guidance": asdict(guidance),
               "constraints": [{"kind": c.kind, "weight": c.weight,
                                "step_size": c.step_size} for c in constraints],
               "steps": trace}
    return motion, sidecar


def constrained_sample(backbone, adapter, sched, prompt, constraints,
                       style_ref=None, length=64, guidance=None, seed=0,
                       n_steps=DEFAULT_SAMPLE_STEPS, fps=mo.DEFAULT_FPS):
    """sample() with motion-space constraint guidance enabled."""
    if not constraints:
        raise ValueError("constrained_sample needs at least one constraint")
    return sample(backbone, adapter, sched, prompt, style_ref=style_ref,
                  length=length, guidance=guidance, seed=seed, n_steps=n_steps,
                  fps=fps, constraints=tuple(constraints))


def sample_batch(backbone, adapter, sched, prompts, style_refs=None, length=64,
                 guidance=None, seed=0, n_steps=DEFAULT_SAMPLE_STEPS,
                 fps=mo.DEFAULT_FPS):
    """Batched generation: prompts[i] with style_refs[i]. All refs or none.
    Per-item noise comes from per-index streams, so regenerating any subset
    with the same seed and positions reproduces it."""
    guidance = guidance or GuidanceConfig()
    _check_length(backbone, length)
    idx = {backbone.content_index(p) for p in prompts}
    if len(idx) != 1:
        raise ValueError("sample_batch shares one prompt per call")
    idx = idx.pop()
    films = s_ref = None
    if style_refs is not None:
        if len(style_refs) != len(prompts):
            raise ValueError("one style reference per prompt")
        embs = []
        for ref in style_refs:
            _, _, z0 = backbone.vae_encode(ref.frames)
            with T.no_grad():
                embs.append(adapter.encode_style(Tensor(z0)).data)
        s_ref = np.stack(embs)
        films = adapter.precompute_adapted_films(Tensor(s_ref))
    elif guidance.w_style != 0.0 or guidance.lambda_style != 0.0:
        raise ValueError("style guidance requires style references")
    v = backbone.vae_cfg
    z = np.stack([derive_rng(seed, "sample-init", i).normal(
        size=(length // v.patch, v.j_latent, v.d_latent))
        for i in range(len(prompts))])
    grid = step_grid(sched, n_steps)
    z0, trace = _sample_core(backbone, adapter, sched, idx, films, s_ref,
                             guidance, z, grid, fps)
    frames = backbone.vae_decode(z0, fps)
    out = []
    for i, prompt in enumerate(prompts):
        style_id = style_refs[i].style_id if style_refs is not None else "unstyled"
        out.append(mo.MotionSequence(frames[i], fps, prompt, style_id, "generated"))
    return out, trace


def style_transfer(backbone, adapter, sched, source, prompt, style_ref,
                   invert_steps, guidance=None, seed=0,
                   n_steps=DEFAULT_SAMPLE_STEPS, fps=None, return_latents=False):
    """Invert a source motion to a chosen noise depth with its own text
    condition, then re-generate under the target prompt and style.

    The inversion depth snaps down to the sampling grid. invert_steps = 0
    reduces to an autoencoder roundtrip. With return_latents the source and
    regenerated clean latents are appended to the result for roundtrip
    analysis."""
    guidance = guidance or GuidanceConfig()
    if invert_steps > sched.num_steps:
        raise ValueError(f"invert_steps {invert_steps} exceeds the "
                         f"{sched.num_steps}-step schedule")
    if invert_steps < 0:
        raise ValueError("invert_steps must be >= 0")
    fps = fps or source.fps
    idx = backbone.content_index(prompt)
    src_idx = backbone.content_index(source.content_id)
    films = s_ref = None
    if style_ref is not None:
        s, films = _encode_reference(backbone, adapter, style_ref)
        s_ref = s[None, :]
    elif guidance.w_style != 0.0 or guidance.lambda_style != 0.0:
        raise ValueError("style guidance requires a style reference")

    _, _, z0 = backbone.vae_encode(source.frames)
    z = z0[None]
    grid = step_grid(sched, n_steps)
    sub = [int(t) for t in grid if t <= invert_steps]       # descending, ends at 0
    ascending = sub[::-1]
    invert_trace = []
    with T.no_grad():
        for i in range(len(ascending) - 1):
            t_lo, t_hi = ascending[i], ascending[i + 1]
            v = backbone.denoise(Tensor(z), t_lo, cond=np.array([src_idx]))
            z = ddim_invert_step(sched, z, t_lo, t_hi, v.data)
            invert_trace.append({"t_from": t_lo, "t_to": t_hi})
    z0_out, reverse_trace = _sample_core(backbone, adapter, sched, idx, films,
                                         s_ref, guidance, z,
                                         np.array(sub), fps)
    frames = backbone.vae_decode(z0_out, fps)[0]
    motion = mo.MotionSequence(frames, fps, prompt,
                               style_ref.style_id if style_ref else source.style_id,
                               "generated")
    sidecar = {"seed": seed, "prompt": prompt, "source_content": source.content_id,
               "source_style": source.style_id,
               "style_ref": style_ref.style_id if style_ref else None,
               "invert_steps": invert_steps, "n_steps": n_steps,
               "guidance": asdict(guidance),
               "invert": invert_trace, "steps": reverse_trace}
    if return_latents:
        return motion, sidecar, (z0, z0_out[0])
    return motion, sidecar


def placeholder_style_spec(style_id):
    """Dataset records index into the style table, so outputs with no real
    style (unstyled samples) get a mid-range stand-in entry."""
    params = {k: 0.5 * (lo + hi) for k, (lo, hi) in mo.PARAM_RANGES.items()}
    return mo.StyleSpec(style_id, params, {k: 0.0 for k in mo.PARAM_NAMES})


def write_sample_outputs(stem, motion, sidecar, style_spec, content_spec,
                         svg=False):
    """Emit <stem>.hlmd (single-record dataset), <stem>.json sidecar and an
    optional <stem>.svg render. Returns the list of paths written."""
    from .formats import save_dataset
    if style_spec is None or style_spec.style_id != motion.style_id:
        style_spec = placeholder_style_spec(motion.style_id)
    ds = mo.Dataset(sequences=[motion], style_specs=[style_spec],
                    content_specs=[content_spec],
                    seed=int(sidecar.get("seed", 0)), fps=motion.fps)
    paths = [f"{stem}.hlmd", f"{stem}.json"]
    save_dataset(ds, paths[0])
    with open(paths[1], "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if svg:
        paths.append(f"{stem}.svg")
        with open(paths[2], "w") as fh:
            fh.write(render_svg(motion))
    return paths

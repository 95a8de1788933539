"""Variance-preserving noise schedules and velocity-parameterized DDIM.

All algebra lives in the (alpha, sigma) pair with alpha^2 + sigma^2 = 1:

    z_t   = alpha_t * z0 + sigma_t * eps
    v_t   = alpha_t * eps - sigma_t * z0
    z0_hat = alpha_t * z_t - sigma_t * v_hat
    eps_hat = sigma_t * z_t + alpha_t * v_hat

A DDIM transition reassembles the pair at the destination timestep:
z_dst = alpha_dst * z0_hat + sigma_dst * eps_hat. Stepping toward t=0 is
the reverse pass. Substituting the pair shows the reverse transition is
the affine map z_to = C z_from + S v_hat with C = a_to a_from + s_to s_from
and S = s_to a_from - a_to s_from, so the inversion pass solves that map
for its source: z_next = (z_t - S v_hat) / C. That makes invert-then-step
an exact identity under a shared v_hat, and it agrees with reassembling
(z0_hat, eps_hat) toward higher noise to first order in the per-step
schedule angle (the two coincide as the step size shrinks).

The functions accept plain ndarrays (training paths, no tape) or Tensors
(guidance paths that differentiate through the reassembly). Timesteps are
integer indices 0..num_steps; per-element timestep arrays are supported
on the ndarray path only.
"""

import numpy as np

from .tensor import Tensor

DEFAULT_TRAIN_STEPS = 1000
DEFAULT_SAMPLE_STEPS = 50

_CLOSURE_TOL = 1e-12


class NoiseSchedule:
    """Discrete (alpha, sigma) tables over timesteps 0..num_steps.

    Validated at construction: alpha[0] == 1 and sigma[0] == 0 exactly,
    alpha monotone non-increasing, and alpha^2 + sigma^2 == 1 within 1e-12
    at every index.
    """

    def __init__(self, kind, alpha, sigma):
        alpha = np.asarray(alpha, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        if alpha.ndim != 1 or alpha.shape != sigma.shape:
            raise ValueError(f"alpha/sigma must be matching 1-D tables, got {alpha.shape} and {sigma.shape}")
        if alpha[0] != 1.0 or sigma[0] != 0.0:
            raise ValueError(f"schedule must start clean: alpha[0]={alpha[0]!r}, sigma[0]={sigma[0]!r}")
        if np.any(np.diff(alpha) > 0.0):
            raise ValueError("alpha must be monotone non-increasing")
        closure = np.abs(alpha * alpha + sigma * sigma - 1.0)
        if closure.max() > _CLOSURE_TOL:
            raise ValueError(f"variance closure violated by {closure.max():.3e}")
        self.kind = kind
        self.alpha = alpha
        self.sigma = sigma
        self.num_steps = alpha.shape[0] - 1

    def coeffs(self, t):
        """(alpha_t, sigma_t) for an int timestep or an int array."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.num_steps):
            raise ValueError(f"timestep {t} outside [0, {self.num_steps}]")
        return self.alpha[t], self.sigma[t]


def make_schedule(kind="cosine", num_steps=DEFAULT_TRAIN_STEPS):
    """Build a variance-preserving schedule of the named kind.

    cosine:    alpha_t follows a shifted cosine from 1 to 0 (offset 0.008
               keeps early steps from collapsing onto the clean sample).
    linear-vp: alpha_t = sqrt(cumprod(1 - beta_t)) with beta linear in
               [1e-4, 2e-2], the classic DDPM ramp.
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    t = np.arange(num_steps + 1, dtype=np.float64)
    if kind == "cosine":
        s = 0.008
        angle = (t / num_steps + s) / (1.0 + s) * (np.pi / 2.0)
        alpha = np.cos(angle) / np.cos(s / (1.0 + s) * (np.pi / 2.0))
        alpha = np.clip(alpha, 0.0, 1.0)
        alpha[0] = 1.0
    elif kind == "linear-vp":
        beta = np.linspace(1e-4, 2e-2, num_steps)
        abar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        alpha = np.sqrt(abar)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; use 'cosine' or 'linear-vp'")
    sigma = np.sqrt(np.clip(1.0 - alpha * alpha, 0.0, None))
    sigma[0] = 0.0
    return NoiseSchedule(kind, alpha, sigma)


def _combine(a, coef_a, b, coef_b):
    """coef_a * a + coef_b * b for matching ndarray/Tensor operands."""
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
            raise TypeError("mixing Tensor and ndarray operands")
        if not (np.isscalar(coef_a) or np.asarray(coef_a).ndim == 0):
            raise TypeError("per-element timesteps require the ndarray path")
        return a * float(coef_a) + b * float(coef_b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ca = np.asarray(coef_a, dtype=np.float64)
    cb = np.asarray(coef_b, dtype=np.float64)
    if ca.ndim == 1:  # per-sample timesteps against leading batch axis
        if ca.shape[0] != a.shape[0]:
            raise ValueError(f"timestep batch {ca.shape[0]} does not match data batch {a.shape[0]}")
        shape = (a.shape[0],) + (1,) * (a.ndim - 1)
        ca = ca.reshape(shape)
        cb = cb.reshape(shape)
    return ca * a + cb * b


def forward_diffuse(schedule, z0, t, eps):
    """z_t = alpha_t z0 + sigma_t eps."""
    a, s = schedule.coeffs(t)
    return _combine(z0, a, eps, s)


def target_velocity(schedule, z0, t, eps):
    """v_t = alpha_t eps - sigma_t z0."""
    a, s = schedule.coeffs(t)
    return _combine(eps, a, z0, -s)


def recover_clean(schedule, z_t, t, v_hat):
    """z0_hat = alpha_t z_t - sigma_t v_hat."""
    a, s = schedule.coeffs(t)
    return _combine(z_t, a, v_hat, -s)


def recover_noise(schedule, z_t, t, v_hat):
    """eps_hat = sigma_t z_t + alpha_t v_hat."""
    a, s = schedule.coeffs(t)
    return _combine(z_t, s, v_hat, a)


def _reassemble(schedule, z_t, t, t_dst, v_hat):
    a_dst, s_dst = schedule.coeffs(t_dst)
    z0_hat = recover_clean(schedule, z_t, t, v_hat)
    eps_hat = recover_noise(schedule, z_t, t, v_hat)
    return _combine(z0_hat, a_dst, eps_hat, s_dst)


def ddim_step(schedule, z_t, t, t_prev, v_hat):
    """Deterministic reverse transition t -> t_prev (requires t_prev <= t)."""
    if t_prev > t:
        raise ValueError(f"reverse step must not increase noise: t_prev={t_prev} > t={t}")
    return _reassemble(schedule, z_t, t, t_prev, v_hat)


def ddim_invert_step(schedule, z_t, t, t_next, v_hat):
    """Deterministic inversion transition t -> t_next (requires t_next >= t).

    Exact inverse of ddim_step(..., t_next, t, v_hat): solves the reverse
    transition's affine map for its source. Jumps so large that the map
    degenerates (cosine of the schedule-angle difference under 1e-6) are
    rejected; inversion is meant to walk the sampling grid stepwise.
    """
    if t_next < t:
        raise ValueError(f"inversion step must not decrease noise: t_next={t_next} < t={t}")
    a_t, s_t = schedule.coeffs(t)
    a_n, s_n = schedule.coeffs(t_next)
    c = a_t * a_n + s_t * s_n
    s = s_t * a_n - a_t * s_n
    if abs(float(c)) < 1e-6:
        raise ValueError(f"inversion jump {t}->{t_next} is degenerate (cos {float(c):.2e})")
    return _combine(z_t, 1.0 / c, v_hat, -s / c)


def step_grid(schedule, num_sample_steps=DEFAULT_SAMPLE_STEPS):
    """Descending timestep grid [T, ..., 0] with num_sample_steps transitions,
    spaced uniformly over the training schedule."""
    if not (1 <= num_sample_steps <= schedule.num_steps):
        raise ValueError(f"sample steps {num_sample_steps} outside [1, {schedule.num_steps}]")
    grid = np.linspace(schedule.num_steps, 0, num_sample_steps + 1)
    grid = np.round(grid).astype(np.int64)
    if np.any(np.diff(grid) >= 0):
        raise ValueError("grid degenerated; too many sample steps for this schedule")
    return grid

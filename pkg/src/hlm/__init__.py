"""hlm: hypernetwork-LoRA styled motion diffusion, desk scale.

A fully self-contained lab: a miniature latent motion diffusion backbone
trained on procedurally generated styled locomotion, a style adapter
(style encoder + hypernetwork emitting LoRA updates to FiLM generators),
and a guided DDIM sampler with three-way classifier-free guidance,
style-encoder gradient guidance, constraint guidance, and inversion-based
style transfer.
"""

__version__ = "0.1.0"

"""Cued Speech gesture generation: rule-based gloss compilation, contrastive
gloss/motion encoders, gloss-prompted latent diffusion with an audio-driven
rhythm module, and an evaluation metric suite.

Submodules are imported lazily where it matters: the gloss compiler
(:mod:`cuedgen.rules`) is pure stdlib so the ``gloss`` CLI path stays fast,
while the neural stages pull in torch only when actually used.
"""

__version__ = "0.1.0"

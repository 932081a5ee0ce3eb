"""Self-supervised pseudo-whitening at desk scale.

A small, deterministic implementation of redundancy-reduction SSL where the
whitening target's off-diagonal entries come from the latent cross-correlation
of jointly trained autoencoders, plus block ensembles with majority-vote
evaluation and an auto-correlation variant that halves per-step overhead.

Submodules are imported explicitly, e.g. ``from pseudowhiten import numerics``.
"""

__version__ = "0.1.0"

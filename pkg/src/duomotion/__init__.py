"""duomotion: two-person interacting motion reconstruction at desk scale.

Subsystems:

- ``tensor`` / ``optim``: numpy-backed reverse-mode autodiff, AdamW, L-BFGS.
- ``rotations`` / ``alignment``: rotation forms and Procrustes alignment.
- ``body``: parametric two-person body, forward kinematics, capsule surface.
- ``collision``: BVH collision detection, penetration loss, capsule SDF.
- ``diffusion``: anchored forward/reverse diffusion and the sampling loop.
- ``infiller`` / ``geometry_net``: the two-branch denoiser and the joint
  trajectory regressor with its ST-GCN embedding.
- ``refiner``: confidence merge and guided re-sampling with factorized L-BFGS.
- ``annotation``: contact derivation, prompt/parse toolchain, text encoding.
- ``synthdata``: deterministic two-person interaction clip generator.
- ``metrics``: the interaction metric suite and report writers.
- ``cli``: pipeline orchestration (``duomotion --help``).
"""

__version__ = "0.1.0"

"""Gray-box vehicle dynamics and risk-aware sampling MPC.

A numpy library in four layers: a Pacejka dynamic-bicycle simulator
(``dynamics``), hybrid neural/physics and black-box dynamics models
(``models``), dataset generation and training (``training``), and a smooth
path-integral controller with a latent tire-force risk cost (``smppi``)
evaluated closed-loop by ``harness``. The ``cli`` module wires the pipeline
into one reproducible command-line tool.
"""

__version__ = "0.1.0"

"""Force-aware imitation pipeline for compliant peeling tasks.

The package covers the full loop: gravity calibration of a wrist
force-torque sensor, alignment of multi-rate recordings, point-cloud
preparation, a conditional diffusion policy over wrench-pose action chunks,
hybrid force-position execution, and a simulated peel benchmark that scores
rollouts.
"""

__version__ = "0.1.0"

"""capguard: safety monitoring for image classifiers.

Fused class-activation probability maps, attribution coverage metrics,
statistical-distance drift detection, and selective prediction gating.
"""

__version__ = "0.1.0"

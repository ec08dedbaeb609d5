"""PoseFace at desk scale: pose-adaptive angular margins with orthogonal identity/pose subspaces."""

__version__ = "0.1.0"

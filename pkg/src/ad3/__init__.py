"""AD3: separated world models driven by inferred implicit distractor actions."""

__version__ = "0.1.0"

"""Grid-world simulator and double deep Q-learning trainer for autonomous
resource management over a multi-project portfolio (CRA and DH task modes)."""

__version__ = "0.1.0"

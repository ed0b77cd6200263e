"""Auto-pruning policy search with DDPG, accelerated by historical pruning data."""

__version__ = "0.1.0"

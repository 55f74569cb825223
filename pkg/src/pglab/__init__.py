"""PPO, GRPO and Hybrid GRPO on one shared numpy training kernel."""

__version__ = "0.1.0"

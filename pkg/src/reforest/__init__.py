"""Multi-agent drone reforestation: terrain, swarm env, comms, PPO."""

__version__ = "0.1.0"

"""Learned join ordering: a simulated optimizer environment, plan encoders and a DQN agent."""

__version__ = "0.1.0"

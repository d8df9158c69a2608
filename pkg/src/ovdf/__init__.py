"""Delay-optimal anycast data forwarding for vehicular sensor networks:
road-graph modeling, traffic statistics, an MDP policy solver, and a
deterministic discrete-event simulator with baseline protocols."""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

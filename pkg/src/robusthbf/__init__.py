"""Outage-constrained energy-efficient hybrid downlink beamforming.

Channel/CSI simulation, a duality-based QoS beamforming solver with greedy
analog codeword selection, implicit differentiation through the solver,
a small graph-convolutional network producing instance-adaptive virtual
channels, and a primal-dual constrained training loop.
"""

__version__ = "0.1.0"

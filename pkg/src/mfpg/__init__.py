"""Multi-fidelity policy gradients: REINFORCE with a low-fidelity control variate."""

__version__ = "0.1.0"

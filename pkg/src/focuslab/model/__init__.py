"""Focus-step network, losses, manual backpropagation and training."""

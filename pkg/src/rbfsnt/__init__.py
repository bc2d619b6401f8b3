"""CNN backbones with RBF classifier heads, white-box attacks, and an
entropy-based adversarial detector built on guided backpropagation."""

__version__ = "0.1.0"

"""satlab: stylized adversarial training, attacks, and robustness evaluation."""

__version__ = "0.1.0"

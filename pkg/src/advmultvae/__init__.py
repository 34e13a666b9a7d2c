"""MultVAE and adversarially debiased Adv-MultVAE for top-k recommendation."""

__version__ = "0.1.0"

"""Few-shot adaptation with certified risk: a diffusion model over adapter
parameters supplies a finite hypothesis set, downstream tasks pick the
support-risk minimizer, and a finite-hypothesis PAC-Bayes bound certifies it."""

__version__ = "0.1.0"

"""Multi-stage visual pretraining at desk scale: architecture search, amateur/expert/generalist
upstream stages, downstream adaptation and an evaluation harness."""

__version__ = "0.1.0"

"""Video reconstruction from simulated fMRI: encoder, decoder and evaluation."""
__version__ = "0.1.0"

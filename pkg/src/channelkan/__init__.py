"""Dual-domain CNN-KAN channel prediction on synthetic MIMO-OFDM CSI."""

__version__ = "0.1.0"

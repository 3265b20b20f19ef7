"""Desk-scale laboratory for speech-to-LLM alignment.

A float64 autodiff engine, toy speech encoders, two projector families, a
small decoder-only character LM with LoRA, staged freeze/unfreeze training,
synthetic speech-like data, and CER evaluation — all from scratch on numpy,
sized so every experiment reruns in minutes on a laptop CPU.
"""

__version__ = "0.1.0"

"""Fusing LoRA adapters through a meta-trained, task-vector-conditioned VAE."""

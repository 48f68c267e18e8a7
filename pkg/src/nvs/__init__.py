"""Unposed sparse-view novel-view synthesis and 3D distillation."""

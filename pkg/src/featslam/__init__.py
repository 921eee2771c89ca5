"""Gaussian-splatting RGB-D SLAM with compact distilled language features."""

"""Synthetic parcel-pile scenes, analytic suction-grasp scores and a toy
diffusion score predictor with an AP evaluation harness."""

__version__ = "0.1.0"

"""MUCA semi-supervised segmentation at desk scale."""

"""Exemplar-based object reposing at desk scale.

Keypoint correspondences between an appearance image and a pose exemplar
drive a flow-predicting U-Net that warps the appearance image, and a
style-modulated generator re-renders the warped result.
"""

__version__ = "0.1.0"

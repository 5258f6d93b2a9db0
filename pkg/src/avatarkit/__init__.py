"""avatarkit: a toy-scale portrait avatar pipeline.

Analytical 3DMM tracking from landmarks, a software rasterizer for the
UV/texture conditioning images, wavelet-domain style-based networks with a
compositional face/foreground/background representation, sliding-window
augmentation, adversarial training, and batch reenactment.
"""

__version__ = "0.1.0"

"""Identity-preserving face augmentation with a conditional cycle-consistent GAN.

Submodules: face_model (morphable model geometry), codes (attribute codes),
networks, losses, synth_data (toy faces), trainer, synthesis, evaluation and cli.
"""

__version__ = "0.1.0"

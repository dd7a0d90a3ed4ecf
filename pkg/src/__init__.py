"""
Multi-modal triplet VAE for paired otoscopy images and wideband tympanometry.
"""

__version__ = "0.1.0"
__author__ = "John Fallot"

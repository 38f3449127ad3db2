"""GAN pretraining of convolutional autoencoders for one-class fingerprint PAD."""

__version__ = "0.1.0"

BONA_FIDE = "bona_fide"
PA = "pa"

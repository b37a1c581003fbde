"""vcforge: many-to-many voice conversion with adversarially trained autoencoders."""

__version__ = "0.1.0"

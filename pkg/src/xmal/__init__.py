"""Caption-guided face matching at desk scale.

Subpackages: encoders (frozen image / trainable text), projections,
alignment (contrastive objectives), fusion, training (two-stage harness),
evaluation (verification and identification metrics), data (synthetic
generator, manifest, tokenizer), cli.
"""

__version__ = "0.1.0"

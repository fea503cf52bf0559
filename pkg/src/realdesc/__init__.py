"""realdesc: real zero-shot classification by description.

Classify images from name-free attribute descriptions: curate descriptions,
strip class names, build text prototypes, evaluate the name gap, extend the
vision encoder with multi-resolution fusion, fine-tune on attribute corpora,
and probe part-attribute recognition.
"""

__version__ = "0.1.0"

from .backbone import BackboneHandle, FreezePolicy, load_checkpoint  # noqa: F401

"""Feature-extraction bridge for the set-compatibility engine.

Turns an image directory plus a raw-text manifest into the engine's
binary feature file (FRNF) and a tokenized manifest, using the
penultimate activations of a torchvision CNN. This package never
imports the engine; the file formats are the contract.
"""

from .extract import ExtractionJob, JobError, extract
from .frnf import write_frnf
from .textprep import tokenize, tokenize_manifest

__version__ = "0.1.0"

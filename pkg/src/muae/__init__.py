"""Multi-adverse-event early warning on perioperative vital-sign series."""

__version__ = "0.1.0"

from . import labels, loss, metrics, model, preprocess, schema, shards, synthgen, trainer  # noqa: F401

"""Token-merging vision-to-language connector, temporal contextualizing and cost model."""

__version__ = "0.1.0"

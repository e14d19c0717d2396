"""Group-relative policy optimization (GRPO and DAPO) on a toy multiple-choice task,
plus rule-based caption-corpus curation."""

__version__ = "0.1.0"

from .captions import PanelSplit, parse_multipanel_caption
from .cleaning import (
    dedup_by_prefix,
    detect_repetition,
    detect_residual_nonlatin,
    replace_reference_terms,
)
from .kmeans import kmeans3, lloyd
from .records import CaptionRecord
from .sampling import proportional_quotas, stratified_sample

__all__ = [
    "CaptionRecord",
    "PanelSplit",
    "dedup_by_prefix",
    "detect_repetition",
    "detect_residual_nonlatin",
    "kmeans3",
    "lloyd",
    "parse_multipanel_caption",
    "proportional_quotas",
    "replace_reference_terms",
    "stratified_sample",
]

"""SIFT keypoints/descriptors plus the keypoint-forensics edits built on them."""

from .sift import Keypoint, SiftParams, detect_sift, describe, detect_and_describe
from .edits import (
    remove_keypoints_smoothing,
    inject_keypoints,
    recover_color,
    save_features_jsonl,
    load_features_jsonl,
)

__all__ = [
    "Keypoint",
    "SiftParams",
    "detect_sift",
    "describe",
    "detect_and_describe",
    "remove_keypoints_smoothing",
    "inject_keypoints",
    "recover_color",
    "save_features_jsonl",
    "load_features_jsonl",
]

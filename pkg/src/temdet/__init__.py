"""Template-based detection of object instances unseen at training time.

Templates rendered from a 3D model are matched against a query image through
learned correlation, producing 2D bounding boxes. The package covers the full
pipeline: synthetic data generation, template rendering, the two-branch
correlation network, training, multi-template inference and evaluation.
"""

from temdet.boxes import BBox, Detection, generate_anchors, iou, nms

__all__ = ["BBox", "Detection", "generate_anchors", "iou", "nms"]

__version__ = "0.1.0"

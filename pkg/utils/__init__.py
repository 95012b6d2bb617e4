"""
Utilities for the segmentation toolkit.

- volume.py: Volume value objects, MVOL I/O and resampling
- hierarchy.py: Nested label schemas and subgroup routing
- loss.py: Generalized Dice and the cascaded objective
- augment.py: Normalization and training augmentation
- postprocess.py: Connected-component and outlier post-processing
- metrics.py: Per-case and cohort metrics
- export_helpers.py: CSV, JSON and Excel export
- formatters.py: Display formatting of metrics
- overlay.py: Per-slice PNG overlays

Submodules are imported where they are used; config.settings imports
utils.errors, so nothing is loaded eagerly here.
"""

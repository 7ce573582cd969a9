"""objcap: two-stage object capture from masked multi-condition images.

Stage 1 learns a density field with camera refinement, stage 2 extracts
grid normals and fits per-image spherical-harmonics lighting plus Phong
materials on top of the frozen geometry.
"""

__version__ = "0.1.0"

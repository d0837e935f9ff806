"""Stage layouts, kept in one place so they can be audited against their source.

Each layout lists nine entries: encoder stages 0-3, the bottleneck, then
decoder stages 3-0.
"""

# Block counts and expansion ratios of the large (L) configuration of the
# original MedNeXt release (52 layers with kernel 3).
V1_L_BLOCKS = (3, 4, 8, 8, 8, 8, 8, 4, 3)
V1_L_RATIOS = (3, 4, 8, 8, 8, 8, 8, 4, 3)

# Desk-scale layout used by tests and demos.
TINY_BLOCKS = (1,) * 9
TINY_RATIOS = (2,) * 9

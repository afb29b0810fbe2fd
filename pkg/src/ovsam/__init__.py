"""Interactive open-vocabulary segmentation on a synthetic shape benchmark:
one frozen backbone, a distilled promptable decoder, and a region
recognition head with frozen-score fusion."""

__version__ = "0.1.0"

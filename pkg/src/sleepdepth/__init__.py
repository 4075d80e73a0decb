"""Continuous sleep depth annotation from polysomnography.

Pipeline: EDF ingestion -> transformer encoder trained with a margin-table
pairwise ranking loss plus REM cross-entropy -> whole-night sleep depth
index (SDI) -> digital biomarkers -> Gaussian-mixture subtyping -> group
statistics and survival analysis.
"""

__version__ = "0.1.0"

"""Driving-style-aware discretionary lane-change decisions from vehicle trajectories.

Pipeline stages live in their own modules: :mod:`~dsadlc.ingest` (recordings),
:mod:`~dsadlc.synthgen` (synthetic traffic), :mod:`~dsadlc.features` (DOPs and
traffic factors), :mod:`~dsadlc.labeling` (cases and splits),
:mod:`~dsadlc.nn` and :mod:`~dsadlc.model` (the classifier),
:mod:`~dsadlc.evaluation` (accuracy and impact) and :mod:`~dsadlc.cli`.
"""

__version__ = "0.1.0"

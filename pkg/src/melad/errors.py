"""Shared exception taxonomy.

Everything raised on bad *user-supplied* inputs (files, manifests, weight
bundles) derives from MeladError so the CLI can map it to a data-error exit
code. Programming errors (wrong shapes passed between internal layers) stay
plain ValueError/TypeError.
"""


class MeladError(Exception):
    """Base class for all errors caused by bad inputs or bad files."""


class DataError(MeladError):
    """Dataset, manifest, or image ingestion problem."""

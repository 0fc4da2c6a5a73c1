"""Exception hierarchy shared across the pipeline.

ValidationError and its subclasses map to CLI exit code 2,
BackendError to exit code 3.
"""


class ValidationError(Exception):
    """Bad input: manifest, spec, flags, or file contents."""


class ManifestError(ValidationError):
    """Manifest missing, malformed, or referentially broken."""


class SpecError(ValidationError):
    """Synthesis spec violates its invariants."""


class NoTumorError(ValidationError):
    """A case with zero viable and zero necrotic tumor pixels cannot be scored."""

    def __init__(self, case_id):
        super().__init__(f"case {case_id!r} has no tumor pixels; necrosis ratio undefined")
        self.case_id = case_id


class BackendError(Exception):
    """Segmentation backend failed (process error, timeout, malformed output)."""


class DegenerateTestError(ValidationError):
    """Log-rank variance is zero; the comparison is untestable."""

"""Exception types shared across the toolkit."""


class MalformedDatasetError(Exception):
    """Dataset layout violates the documented pairing or naming contract."""


class SingularTransformError(Exception):
    """Point correspondences do not determine an invertible homography."""


class CheckpointFormatError(Exception):
    """Checkpoint bytes do not carry the expected header or structure."""


class TrainingDivergenceError(Exception):
    """A non-finite loss was observed; the run was aborted."""


class FeatureExtractorMissingError(Exception):
    """A configured deep feature extractor could not be constructed."""


class ConfigError(Exception):
    """Run configuration failed validation; message names the field."""

"""Exception hierarchy shared across the pipeline."""


class BofError(Exception):
    """Base class for all bofbench errors."""


class DataError(BofError):
    """Input data (audio, manifest, serialized artifact) is invalid."""


class AudioError(DataError):
    pass


class UnreadableAudioError(AudioError):
    pass


class UnsupportedEncodingError(AudioError):
    pass


class EmptyAudioError(AudioError):
    pass


class ManifestError(DataError):
    pass


class PipelineError(BofError):
    """A pipeline stage failed for a specific item."""

    def __init__(self, stage, item_id, cause):
        self.stage = stage
        self.item_id = item_id
        self.cause = cause
        super().__init__(f"stage {stage!r} failed on item {item_id!r}: {cause}")

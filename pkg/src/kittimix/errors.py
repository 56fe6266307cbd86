"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, missing
inputs exit 3, anything else exits 4.
"""


class KittimixError(Exception):
    """Base class for all package-specific errors."""


class MalformedLine(KittimixError):
    """A label line that is not 15- or 16-field KITTI format."""

    def __init__(self, path, line_no, text):
        self.path = path
        self.line_no = line_no
        self.text = text
        super().__init__(f"{path}:{line_no}: malformed label line: {text!r}")


class MalformedCalib(KittimixError):
    """A calibration entry whose payload is not 12 reals."""


class MissingP2(KittimixError):
    """Calibration file with no P2 entry."""


class BehindCamera(KittimixError):
    """A 3D box with at least one corner at non-positive depth."""


class CropOutOfImage(KittimixError):
    """Crop rectangle with no overlap with the source image."""


class EmptyPools(KittimixError):
    """Target sampling with both the labeled and background pools empty."""


class EmptyInstanceDatabase(KittimixError):
    """Composition requested against a database with zero records."""


class CalibrationMismatch(KittimixError):
    """Patch source and paste target disagree on camera calibration."""


class PatchTooSmall(KittimixError):
    """An augmentation would leave no pixels."""


class ShapeMismatch(KittimixError):
    """Blend operands with different shapes."""


class ConfigParseError(KittimixError):
    """Config file that is not parseable key-value text."""

    def __init__(self, location, reason):
        self.location = location
        self.reason = reason
        super().__init__(f"{location}: {reason}")


class ConfigValidationError(KittimixError):
    """Config with an unknown or out-of-range field."""

    def __init__(self, field, reason):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class MissingPredictions(KittimixError):
    """Prediction files absent for one ensemble member."""

    def __init__(self, model, frames):
        self.model = model
        self.frames = list(frames)
        shown = ", ".join(str(f) for f in self.frames[:8])
        if len(self.frames) > 8:
            shown += f", ... ({len(self.frames)} total)"
        super().__init__(f"model {model}: no predictions for {shown}")

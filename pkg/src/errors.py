"""Exception taxonomy. ``exit_code`` is what ``manage.py`` returns to the shell."""


class RankMergeError(Exception):
    exit_code = 1


class InputValidationError(RankMergeError, ValueError):
    exit_code = 2


class MatrixValidationError(InputValidationError):
    pass


class MaskValidationError(InputValidationError):
    pass


class InventoryMismatchError(InputValidationError):
    pass


class ManifestError(InputValidationError):
    pass


class AdapterFormatError(InputValidationError):
    pass


class TruncatedFileError(AdapterFormatError):
    pass


class OverlappingOffsetsError(AdapterFormatError):
    pass


class TensorShapeError(AdapterFormatError):
    pass


class MissingTensorError(AdapterFormatError):
    pass


class UnsupportedDtypeError(AdapterFormatError):
    pass


class NumericError(RankMergeError, ArithmeticError):
    exit_code = 3


IO_EXIT_CODE = 4

class DexArError(Exception):
    """Base error for the attribution lab"""


class TensorError(DexArError):
    pass


class ModelError(DexArError):
    pass


class TrainingError(ModelError):
    pass


class AttributionError(DexArError):
    pass


class UnsupportedArchitectureError(AttributionError):
    """Method is not applicable to the model's architecture"""


class MetricError(DexArError):
    pass


class DatasetError(DexArError):
    pass


class SceneGenerationError(DatasetError):
    pass


class DatasetFormatError(DatasetError):
    pass


class ConfigError(DexArError):
    pass


class ReportError(DexArError):
    pass

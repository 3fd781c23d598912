"""Cross-modal knowledge distillation for time-series forecasting.

A numpy reverse-mode autodiff core, a series pipeline, a patch transformer,
a series-to-image renderer, teacher/student forecasters and the distillation
objective that ties them together.
"""
from .config import RunConfig, load_config
from .models import CrossModalForecaster, ModelOutputs, build_config
from .series import Series, SeriesWindow, SplitSpec

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "CrossModalForecaster", "ModelOutputs", "build_config", "Series",
           "SeriesWindow", "SplitSpec"]

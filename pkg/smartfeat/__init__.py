"""Failure prediction on SMART telemetry with derived feature channels and a small convolutional classifier."""

from .ingest import *
from .featurize import *
from .dataset import *
from .nn import *
from .ensemble import *
from .evaluation import *
from .synth import *
from .config import *
from .executor import *

__version__ = "0.1.0-dev.1"
released_version = "0.0.0"

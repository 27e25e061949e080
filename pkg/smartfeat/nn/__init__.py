"""A small 1-D convolutional classifier written directly against numpy, with hand-written backpropagation."""

from .layers import *
from .model import *

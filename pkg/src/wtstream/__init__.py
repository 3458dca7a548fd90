"""Streaming water temperature prediction node."""
from .broker import Broker, DataPoint, StreamKind
from .node import Node

__version__ = "0.1.0"

__all__ = ["Broker", "DataPoint", "Node", "StreamKind", "__version__"]

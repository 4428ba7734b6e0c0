"""hatserve: HTTP inference service for text-conditioned zero-shot detection."""

from .app import create_app
from .models import Owlv2Adapter, StubAdapter, load_adapter

__version__ = "0.1.0"

__all__ = ["create_app", "load_adapter", "Owlv2Adapter", "StubAdapter"]

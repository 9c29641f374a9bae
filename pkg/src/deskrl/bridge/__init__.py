from .protocol import MessageDecoder, encode_message, validate_message
from .server import BridgeServer, serve
from .teleop import DemoCollectionSession

__all__ = [
    "BridgeServer",
    "DemoCollectionSession",
    "MessageDecoder",
    "encode_message",
    "serve",
    "validate_message",
]

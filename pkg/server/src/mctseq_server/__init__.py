"""Neural policy/value backend for the sequence-decoding search engine.

Runs a transformer encoder/decoder behind the engine's stream-socket
evaluation protocol, so searches and joint training drive the network
remotely instead of the in-process tabular model.
"""
from .config import ServerConfig
from .net import PolicyValueNet
from .server import ModelServer, serve

__all__ = ["ServerConfig", "PolicyValueNet", "ModelServer", "serve"]

"""batchstore: a self-hostable object store with ordered batch retrieval.

A cluster is one or more stateless proxy gateways plus storage targets.
Clients retrieve many objects (or archive members) with a single request
and receive one TAR stream whose entries appear in request order, with
optional per-entry error placeholders instead of request aborts.
"""

__version__ = "0.1.0"

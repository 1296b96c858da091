"""batchclient: thin HTTP client for batchstore batch retrieval.

Build the batch after sampling, issue one request, iterate the ordered
results:

    from batchclient import Client

    client = Client("http://gateway:8800")
    bucket = client.bucket("training-data")
    for info, content in client.batch(names, bucket, coer=True).get():
        process(info, content)
"""

from batchclient.client import (
    BatchHandle,
    BucketHandle,
    Client,
    ClientError,
    ItemInfo,
    ProtocolError,
    RateLimitedError,
    StreamAbortedError,
)

__all__ = [
    "BatchHandle",
    "BucketHandle",
    "Client",
    "ClientError",
    "ItemInfo",
    "ProtocolError",
    "RateLimitedError",
    "StreamAbortedError",
]

__version__ = "0.1.0"

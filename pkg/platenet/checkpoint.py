"""
Binary model checkpoints.

Layout, little-endian throughout:

    header   magic b"NPDK", uint32 format version, uint64 payload length
    payload  uint32 config length, config YAML (utf-8), uint32 blob count,
             then per blob: uint16 name length, name (utf-8), uint8 ndim, uint32 dims, float32 data
    trailer  8 byte BLAKE2b digest of the payload

Parameters are stored at 32-bit precision and widened back to float64 on load.
"""
import hashlib
import logging
import struct

import numpy as np
import yaml

from platenet import PlatenetError
from platenet import architectures


logger = logging.getLogger("platenet")

MAGIC = b"NPDK"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIQ")
CHECKSUM_SIZE = 8
STORAGE_DTYPE = np.dtype("<f4")


class CheckpointError(PlatenetError): pass

class CheckpointMagicError(CheckpointError): pass

class CheckpointVersionError(CheckpointError): pass

class CheckpointChecksumError(CheckpointError): pass

class CheckpointTruncatedError(CheckpointError): pass


def _checksum(payload):
    return hashlib.blake2b(payload, digest_size=CHECKSUM_SIZE).digest()


def _plain(value):
    """Tuples and numpy scalars as the plain types yaml.safe_dump accepts."""
    if isinstance(value, dict):
        return {str(key): _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def encode_checkpoint(network):
    config = yaml.safe_dump(_plain(network.config), sort_keys=True).encode("utf-8")
    arrays = network.named_arrays()
    chunks = [struct.pack("<I", len(config)), config, struct.pack("<I", len(arrays))]
    for name, array in arrays.items():
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack("<{}I".format(array.ndim), *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=STORAGE_DTYPE).tobytes())
    payload = b"".join(chunks)
    return HEADER.pack(MAGIC, FORMAT_VERSION, len(payload)) + payload + _checksum(payload)


def save_checkpoint(network, path):
    data = encode_checkpoint(network)
    with open(path, "wb") as f:
        f.write(data)
    logger.info("Saved checkpoint %s with %d learnable parameters", path, network.learnable_count)


class _Reader:

    def __init__(self, payload):
        self.payload = payload
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.payload):
            raise CheckpointTruncatedError("Checkpoint payload ends unexpectedly at byte {}".format(self.offset))
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        fmt = struct.Struct(fmt)
        return fmt.unpack(self.take(fmt.size))


def decode_checkpoint(data):
    """
    Validate and split checkpoint bytes into (config dict, {name: float32 array}).
    """
    if len(data) >= len(MAGIC) and data[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError("Not a checkpoint, expected magic {!r} but found {!r}".format(MAGIC, data[:len(MAGIC)]))
    if len(data) < HEADER.size:
        raise CheckpointTruncatedError("Checkpoint is {} bytes, shorter than its header".format(len(data)))
    _, version, length = HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError("Unsupported checkpoint format version {}, expected {}".format(version, FORMAT_VERSION))
    expected = HEADER.size + length + CHECKSUM_SIZE
    if len(data) < expected:
        raise CheckpointTruncatedError("Checkpoint is {} bytes, expected {}".format(len(data), expected))
    payload = data[HEADER.size:HEADER.size + length]
    if _checksum(payload) != data[HEADER.size + length:expected]:
        raise CheckpointChecksumError("Checkpoint checksum does not match its contents")
    reader = _Reader(payload)
    config_length, = reader.unpack("<I")
    config = yaml.safe_load(reader.take(config_length).decode("utf-8")) or {}
    count, = reader.unpack("<I")
    blobs = {}
    for _ in range(count):
        name_length, = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8")
        ndim, = reader.unpack("<B")
        shape = reader.unpack("<{}I".format(ndim))
        size = int(np.prod(shape, dtype=np.int64)) * STORAGE_DTYPE.itemsize
        blobs[name] = np.frombuffer(reader.take(size), dtype=STORAGE_DTYPE).reshape(shape)
    return config, blobs


def load_checkpoint(path):
    """
    Rebuild the Network stored at path.
    Raises a CheckpointError subclass for bad magic, version, checksum or truncation, never returning a partial model.
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError("Unable to read checkpoint {}: {}".format(path, e)) from e
    config, blobs = decode_checkpoint(data)
    try:
        network = architectures.build_model(config, np.random.default_rng(0))
    except (KeyError, architectures.ArchitectureError) as e:
        raise CheckpointError("Checkpoint {} holds an unusable model config: {}".format(path, e)) from e
    arrays = network.named_arrays()
    if set(arrays) != set(blobs):
        raise CheckpointError("Checkpoint {} parameters do not match its model config".format(path))
    for name, array in arrays.items():
        if array.shape != blobs[name].shape:
            raise CheckpointError("Parameter {} has shape {} in {}, expected {}".format(name, blobs[name].shape, path, array.shape))
        array[...] = blobs[name]
    logger.info("Loaded checkpoint %s", path)
    return network

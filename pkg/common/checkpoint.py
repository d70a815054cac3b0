# -*- coding: utf-8 -*-
"""Versioned binary container for named float64 arrays.

Layout (all integers little-endian):

========  ===========================================================
bytes     content
========  ===========================================================
4         magic ``QART``
4         u32 format version
4         u32 length of the metadata blob, then the blob itself (UTF-8
          JSON, keys sorted, no whitespace)
4         u32 number of tensors
...       per tensor: u16 name length, UTF-8 name, u8 ndim, ndim × u32
          extents
...       per tensor, same order: the values as little-endian float64,
          row-major
========  ===========================================================

The same arrays and metadata always serialize to the same bytes, so file
digests can be compared across runs.
"""

import json
import logging
import struct
from collections import OrderedDict

import numpy as np

from common.const import CKPT_MAGIC, CKPT_VERSION
from common.util import FormatError, DataIOError

__all__ = ['save_checkpoint', 'load_checkpoint', 'dump_checkpoint', 'parse_checkpoint']


def dump_checkpoint(tensors, meta=None):
    """Serialize arrays and metadata to bytes.

    :param tensors: Mapping of name to array, serialized in iteration order.
    :type tensors: dict or OrderedDict
    :param dict meta: JSON-serializable metadata.
    :rtype: bytes
    """
    blob = json.dumps(meta or {}, sort_keys=True, separators=(',', ':')).encode('utf-8')
    head = [CKPT_MAGIC, struct.pack('<II', CKPT_VERSION, len(blob)), blob, struct.pack('<I', len(tensors))]
    payload = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype='<f8'))
        raw_name = name.encode('utf-8')
        head.append(struct.pack('<H', len(raw_name)) + raw_name)
        head.append(struct.pack('<B', arr.ndim) + struct.pack('<{}I'.format(arr.ndim), *arr.shape))
        payload.append(arr.tobytes())
    return b''.join(head + payload)


def parse_checkpoint(data):
    """Inverse of :func:`dump_checkpoint`.

    :param bytes data: The serialized container.
    :return: ``(tensors, meta)`` with ``tensors`` an :class:`OrderedDict`.
    :raises FormatError: When the magic, version or any length is wrong.
    """
    reader = _Reader(data)
    if reader.take(4) != CKPT_MAGIC:
        raise FormatError('Not a checkpoint: bad magic bytes', 0)
    version, blob_len = reader.unpack('<II')
    if version != CKPT_VERSION:
        raise FormatError('Unsupported checkpoint version {}'.format(version), 4)
    try:
        meta = json.loads(reader.take(blob_len).decode('utf-8'))
    except ValueError:
        raise FormatError('Checkpoint metadata is not valid JSON', 12)
    count, = reader.unpack('<I')
    directory = []
    for _ in range(count):
        name_len, = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        ndim, = reader.unpack('<B')
        shape = reader.unpack('<{}I'.format(ndim))
        directory.append((name, shape))
    tensors = OrderedDict()
    for name, shape in directory:
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(reader.take(n_bytes), dtype='<f8').astype(np.float64).reshape(shape)
    if reader.pos != len(data):
        raise FormatError('{} trailing bytes after the last tensor'.format(len(data) - reader.pos), reader.pos)
    return tensors, meta


class _Reader:

    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        end = self.pos + n
        if end > len(self.data):
            raise FormatError('Truncated checkpoint: expected {} bytes, {} available'
                              .format(n, len(self.data) - self.pos), self.pos)
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(path, tensors, meta=None):
    """Write arrays and metadata to ``path``.

    :raises DataIOError: When the file can't be written.
    """
    data = dump_checkpoint(tensors, meta)
    try:
        with open(path, 'wb') as fout:
            fout.write(data)
    except OSError as e:
        raise DataIOError('Could not write checkpoint {}: {}'.format(path, e))
    logging.debug('Saved {} tensors ({} bytes) to {}'.format(len(tensors), len(data), path))
    return path


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`.

    :return: ``(tensors, meta)``
    :raises DataIOError: When the file can't be read.
    :raises FormatError: When the file isn't a valid checkpoint.
    """
    try:
        with open(path, 'rb') as fin:
            data = fin.read()
    except OSError as e:
        raise DataIOError('Could not read checkpoint {}: {}'.format(path, e))
    return parse_checkpoint(data)

#!/usr/bin/env python3
# -*- coding: utf-8 -*-

from hashlib import sha256
from itertools import islice, chain

import numpy as np
from munch import Munch, munchify

from common.clr import add_color_log_levels  # Import this here so others can access it
from common.const import FP_BITS, VALID_BITS

__all__ = ['LabError', 'ParameterError', 'DataError', 'ConfigurationError', 'FormatError', 'DataIOError',
           'PROGRESS_PERIOD', 'MunchyMunch', 'chunkify', 'array_digest', 'parse_bits', 'parse_int_list', 'validate_bits',
           'add_color_log_levels']

#: How many steps pass between progress log lines in training loops
PROGRESS_PERIOD = 100


class LabError(Exception):
    """Base class of every error raised by qartlab code."""


class ParameterError(LabError, ValueError):
    """Raised when a numeric parameter is outside the range an operation accepts."""


class DataError(LabError):
    """Raised when a dataset or probe set is empty or unusable."""


class ConfigurationError(LabError):
    """Raised when a run configuration or calibration plan is inconsistent."""


class FormatError(LabError):
    """Raised when a binary file (image or checkpoint) doesn't follow its format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = '{} (at byte {})'.format(message, offset)
        super().__init__(message)
        self.offset = offset


class DataIOError(LabError, OSError):
    """Raised when a file or directory can't be read or written."""


def validate_bits(bits):
    """Validate a bit-width.

    :param int bits: Either one of :data:`~common.const.VALID_BITS` or
        :data:`~common.const.FP_BITS` (full precision).
    :return: The bit-width as an `int`.
    :rtype: int
    :raises ParameterError: When the bit-width is not supported.
    """
    try:
        bits = int(bits)
    except (TypeError, ValueError):
        raise ParameterError('Bit-width must be an integer, got {!r}'.format(bits))
    if bits != FP_BITS and bits not in VALID_BITS:
        raise ParameterError('Bit-width must be one of {} or {}, got {}'.format(VALID_BITS, FP_BITS, bits))
    return bits


def parse_bits(text):
    """Parse a ``"W,A"`` bit setting such as ``"4,4"``.

    :param text: The bit setting as given on the command line, or an already
        parsed pair.
    :type text: str or tuple or list
    :return: Weight and activation bits as a tuple ``(w, a)``.
    :rtype: tuple(int, int)
    :raises ParameterError: When the text doesn't have exactly two fields.
    """
    if isinstance(text, (tuple, list)):
        fields = list(text)
    else:
        fields = [f for f in str(text).replace('W', '').replace('A', ',').split(',') if f.strip()]
    if len(fields) != 2:
        raise ParameterError('Bit setting must look like "W,A" (e.g. "4,4"), got {!r}'.format(text))
    return validate_bits(fields[0]), validate_bits(fields[1])


def parse_int_list(text):
    """Parse a comma separated list of integers, e.g. ``"1,500,1000"``.

    :param text: The list as a string, or an iterable of integers.
    :return: The integers in the order given.
    :rtype: list(int)
    """
    if isinstance(text, (tuple, list)):
        return [int(t) for t in text]
    return [int(t) for t in str(text).split(',') if t.strip()]


def array_digest(*arrays):
    """Return the SHA256 hex digest of one or more arrays.

    The digest covers each array's shape and its little-endian float64 bytes,
    so two arrays only share a digest when they are bit-identical.

    :param arrays: numpy arrays (or anything :func:`numpy.asarray` accepts).
    :rtype: str
    """
    h = sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype='<f8'))
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class MunchyMunch:
    """Wrapper class to munchify ``cfg`` parameters.

    This wrapper converts either the kwarg ``cfg`` or the first positional
    argument (tests in that order) to a :class:`~munch.Munch` object, which
    allows us to refer to keys in the :class:`~munch.Munch` dictionary as if
    they were attributes. See the `docs <https://github.com/Infinidat/munch>`_
    on the :mod:`munch` library for more information.

    Example usage:

    >>> @MunchyMunch
    ... def test_func(cfg)
    ...     # cfg will be converted to a Munch
    ...     print(cfg.seed)
    """

    def __init__(self, f):
        """
        :param f: The function to wrap.
        """
        self.f = f
        self.__module__ = self.f.__module__
        self.__doc__ = self.f.__doc__
        self.__name__ = self.f.__name__
        self.__qualname__ = getattr(self.f, '__qualname__', self.f.__name__)

    def __call__(self, *args, **kwargs):
        if kwargs.get('cfg') is not None:
            if not isinstance(kwargs['cfg'], Munch):
                kwargs['cfg'] = munchify(kwargs['cfg'])
        elif len(args) and isinstance(args[0], dict) and not isinstance(args[0], Munch):
            args = (munchify(args[0]),) + args[1:]
        return self.f(*args, **kwargs)


def chunkify(iterable, chunk_size):
    """Split an iterable into smaller iterables of a certain size (chunk size).

    For example, say you have a list of calibration pairs that you don't want
    to push through the model all at once. You can use :func:`chunkify` to
    easily split up the list to whatever batch size you want:

    >>> for batch in chunkify(range(1, 6), 2):
    ...     print(list(batch))
    [1, 2]
    [3, 4]
    [5]

    Idea borrowed from
    http://code.activestate.com/recipes/303279-getting-items-in-batches/.

    :param iterable: The iterable to be split into chunks.
    :param int chunk_size: Size of each chunk. See above for an example.
    """
    _it = iter(iterable)
    while True:
        batch = islice(_it, chunk_size)
        try:
            first = next(batch)
        except StopIteration:
            return
        yield chain([first], batch)

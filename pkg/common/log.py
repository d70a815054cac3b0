import logging
import sys
from os import makedirs
from os.path import join

import progressbar

from common.clr import add_color_log_levels

# Default logging variables
LOG_FILE = 'qart.log'
LOG_LEVEL = logging.INFO
LOG_FORMAT = '%(asctime)s %(levelname) 8s -- %(message)s'


def log_setup(log_file=LOG_FILE, log_dir=None, verbose=False, log_format=LOG_FORMAT):
    """Initialize logging with some common settings.

    :param str log_file: Name of the log file inside ``log_dir``.
    :param str log_dir: Directory for the log file. When `None`, log records
        go to stderr instead of a file.
    :param bool verbose: Flag that changes the logging level from INFO to
        DEBUG.
    :param str log_format: Format string handed to :func:`logging.basicConfig`.
    :rtype: None
    """
    log_level = logging.DEBUG if verbose else LOG_LEVEL
    root = logging.getLogger()
    for handler in list(root.handlers):
        # A CLI run inside a test session shouldn't append to the previous run's handlers
        root.removeHandler(handler)
        handler.close()
    if log_dir is None:
        logging.basicConfig(stream=sys.stderr, level=log_level, format=log_format)
    else:
        makedirs(log_dir, exist_ok=True)
        with open(join(log_dir, log_file), 'a') as fout:
            fout.write((' --  '*15)+'\n')
        logging.basicConfig(filename=join(log_dir, log_file), level=log_level, format=log_format)
    add_color_log_levels(center=True)


class _NullBar:

    def update(self, value):
        pass

    def finish(self):
        pass


def progress_bar(total, label, enabled=True):
    """Return a progress bar for ``total`` steps, or a no-op stand-in when not ``enabled``.

    :param int total: Number of steps.
    :param str label: Text shown in front of the bar.
    :param bool enabled: Whether to draw anything at all.
    """
    if not enabled or total <= 0:
        return _NullBar()
    return progressbar.ProgressBar(max_value=total,
                                   widgets=[
                                       label, ' ', progressbar.Percentage(), ' ',
                                       progressbar.Bar('=', '[', '] '),
                                       progressbar.Timer('%(elapsed)s'),
                                       ' / ',
                                       progressbar.AdaptiveETA(),
                                   ])

"""Color text for terminal output and log level names.

Typical usage:

>>> red('diverged', False)

Returns the string "diverged" where the text will be red and the background
will be the default.

>>> status('W4A4 calibration finished', ok=True)

Returns the message prefixed with a green ``OK`` tag, the form the command
line uses for its final status line.
"""

import logging
from colorama import init, Back, Fore
init(autoreset=True)

__all__ = ['black', 'red', 'green', 'status', 'add_color_log_levels']

#: Level number → (level name, background color) for colored log output
_LEVEL_COLORS = ((logging.CRITICAL, 'CRITICAL', 'RED'),
                 (logging.ERROR, 'ERROR', 'MAGENTA'),
                 (logging.WARNING, 'WARNING', 'YELLOW'),
                 (logging.INFO, 'INFO', 'BLUE'),
                 (logging.DEBUG, 'DEBUG', 'GREEN'),
                 (logging.NOTSET, 'NOTSET', 'WHITE'))


def _color_it(text, color, bg):
    return getattr(bool(bg) and Back or Fore, color) + str(text) + getattr(bool(bg) and Back or Fore, 'RESET')


def black(text, background=True):
    """Set text (or its background) to be black."""
    return _color_it(text, 'BLACK', background)


def red(text, background=True):
    """Set text (or its background) to be red."""
    return _color_it(text, 'RED', background)


def green(text, background=True):
    """Set text (or its background) to be green."""
    return _color_it(text, 'GREEN', background)


def status(message, ok=True):
    """Return a one-line status message tagged ``OK`` (green) or ``FAIL`` (red).

    :param str message: The message to tag.
    :param bool ok: Whether the tag should report success.
    :rtype: str
    """
    tag = green(' OK ', False) if ok else red('FAIL', False)
    return '[{}] {}'.format(tag, message)


def add_color_log_levels(center=False):
    """Alter log level names to be colored.

    Levels are colored to have black text and a background colored as follows:

    - Level 50 (Critical): red
    - Level 40 (Error): magenta
    - Level 30 (Warning): yellow
    - Level 20 (Info): blue
    - Level 10 (Debug): green
    - Level 0 (Not Set): white

    :param bool center: If log text should be centered. When set to `True`,
        the text will be centered to the width of ``"CRITICAL"``, which is 8
        characters. This makes it so the level in the log output always takes
        up the same number of characters.
    :rtype: None
    """
    for level, name, color in _LEVEL_COLORS:
        if center:
            name = name.center(8)
        logging.addLevelName(level, black(_color_it(name, color, True)))

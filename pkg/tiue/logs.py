import sys
from datetime import datetime
from typing import NoReturn, Type

from loguru import logger as _logger

from .constant import LOG_DIR
from .errors import TiUEError

LOG_FORMAT = ('<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> | <level>{level: <8}</level> | '
              '<magenta>{thread.name}</magenta> | <cyan>{file}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>')


def define_log_level(print_level="INFO", logfile_level="DEBUG", name: str = "run", to_file: bool = True):
    """
    Route log records to stderr and, unless `to_file` is off, to `logs/<name>_<YYYYmmdd_HH>.log`.
    Worker threads of the parallel sampler show up by thread name.

    :param print_level: Log level used to print the log.
    :param logfile_level: Log level used to save to the logfile.
    :param name: Prefix of the log file, usually the subcommand or run id.
    :param to_file: Whether to keep a log file at all.
    :return: The configured logger.
    """
    _logger.remove()
    _logger.add(sys.stderr, level=print_level, format=LOG_FORMAT)
    if to_file:
        stamp = datetime.now().strftime("%Y%m%d_%H")
        _logger.add(LOG_DIR / f"{name}_{stamp}.log", level=logfile_level, format=LOG_FORMAT)
    return _logger


logger = define_log_level().opt(colors=True)


def escape(msg: object) -> str:
    """Escape text so loguru does not read it as colour markup."""
    return str(msg).replace('<', '\\<')


def error_and_raise(msg: str, exc_type: Type[TiUEError] = TiUEError) -> NoReturn:
    logger.error(f"{exc_type.__name__}: {escape(msg)}")
    raise exc_type(msg)

import logging
import sys

LOG_FORMAT = "[%(name)s] %(message)s"


def get_logger(tag: str) -> logging.Logger:
    return logging.getLogger(tag)


def configure_logging(verbose: bool = False) -> None:
    """Console setup for the command-line entry point; modules only call get_logger."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)

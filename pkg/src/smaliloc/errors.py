"""Exception hierarchy shared by every stage.

Each class carries the process exit code the CLI maps it to.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_GATEWAY = 3
EXIT_PARSE_BUDGET = 4


class SmalilocError(Exception):
    exit_code = EXIT_INPUT


class InputError(SmalilocError):
    """Bad or missing input data (files, trees, annotations)."""


class GatewayError(SmalilocError):
    exit_code = EXIT_GATEWAY
    retryable = False

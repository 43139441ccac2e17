"""
Command routing for the effdim command line.
Routers group verbs under one noun, the way API routers group endpoints
under one prefix; the application collects routers into an argparse tree
and maps raised errors to exit codes through registered handlers.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np
from pydantic import BaseModel

from effdim.config import DEFAULT_ATOL, DEFAULT_MAX_STEPS, DEFAULT_RTOL
from effdim.errors import ConfigError, InvalidInputError
from effdim.services.model_zoo import ModelId, Observable, get_spec, parse_times, resolve_state_index
from effdim.services.storage import ArtifactStore, to_jsonable

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace], Any]
ExceptionHandler = Callable[[Exception], int]


def arg(*flags: str, **kwargs: Any) -> Tuple[Tuple[str, ...], Dict[str, Any]]:
    """Declare one argparse argument for a command."""
    return flags, kwargs


def enum_arg(flag: str, enum_type: Type[Enum], **kwargs: Any) -> Tuple[Tuple[str, ...], Dict[str, Any]]:
    """Argument parsed straight into a str-valued Enum member."""
    return arg(flag, type=enum_type, metavar="{" + ",".join(m.value for m in enum_type) + "}", **kwargs)


@dataclass
class Command:
    verb: str
    handler: Handler
    help: str
    arguments: Sequence[Tuple[Tuple[str, ...], Dict[str, Any]]] = ()
    response_model: Optional[Type[BaseModel]] = None


@dataclass
class CommandRouter:
    """Verbs of one CLI noun."""
    noun: str
    help: str = ""
    default_verb: Optional[str] = None
    commands: Dict[str, Command] = field(default_factory=dict)

    def command(self, verb: str, *arguments, help: str = "",
                response_model: Optional[Type[BaseModel]] = None) -> Callable[[Handler], Handler]:
        def register(func: Handler) -> Handler:
            doc = (func.__doc__ or "").strip().splitlines()
            self.commands[verb] = Command(verb, func, help or (doc[0] if doc else ""), arguments, response_model)
            return func
        return register


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser that raises ConfigError instead of exiting."""

    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


class CLIApp:
    def __init__(self, prog: str, description: str, version: str):
        self.prog = prog
        self.description = description
        self.version = version
        self.routers: Dict[str, CommandRouter] = {}
        self.exception_handlers: List[Tuple[Type[BaseException], ExceptionHandler]] = []

    def include_router(self, router: CommandRouter) -> None:
        self.routers[router.noun] = router

    def exception_handler(self, exc_type: Type[BaseException]) -> Callable[[ExceptionHandler], ExceptionHandler]:
        def register(func: ExceptionHandler) -> ExceptionHandler:
            self.exception_handlers.append((exc_type, func))
            return func
        return register

    def build_parser(self) -> ArgumentParser:
        parser = ArgumentParser(prog=self.prog, description=self.description)
        parser.add_argument("--version", action="version", version=f"%(prog)s {self.version}")
        parser.add_argument("--log-level", default=None, help="Overrides EFFDIM_LOG_LEVEL")
        nouns = parser.add_subparsers(dest="noun", metavar="<noun>", parser_class=ArgumentParser)
        nouns.required = True
        for noun, router in self.routers.items():
            noun_parser = nouns.add_parser(noun, help=router.help, description=router.help)
            verbs = noun_parser.add_subparsers(dest="verb", metavar="<verb>", parser_class=ArgumentParser)
            verbs.required = True
            for verb, command in router.commands.items():
                verb_parser = verbs.add_parser(verb, help=command.help, description=command.help)
                for flags, kwargs in command.arguments:
                    verb_parser.add_argument(*flags, **kwargs)
                verb_parser.set_defaults(_command=command)
        return parser

    def _expand_default_verb(self, argv: List[str]) -> List[str]:
        # `effdim dmaps --dataset ...` is shorthand for the noun's default verb
        for i, token in enumerate(argv):
            if token in self.routers:
                router = self.routers[token]
                rest = argv[i + 1:]
                if router.default_verb and (not rest or rest[0].startswith("-")) and "-h" not in rest[:1] \
                        and "--help" not in rest[:1]:
                    return argv[:i + 1] + [router.default_verb] + rest
                return argv
        return argv

    def parse(self, argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
        argv = list(sys.argv[1:] if argv is None else argv)
        return self.build_parser().parse_args(self._expand_default_verb(argv))

    def dispatch(self, args: argparse.Namespace) -> int:
        command: Command = args._command
        logger.debug(f"Dispatching {args.noun} {args.verb}")
        result = command.handler(args)
        if result is not None:
            if command.response_model is not None:
                result = command.response_model.model_validate(result).model_dump(mode="json")
            print(json.dumps(to_jsonable(result), indent=2, sort_keys=True))
        return 0

    def handle(self, exc: Exception) -> int:
        for exc_type, func in self.exception_handlers:
            if isinstance(exc, exc_type):
                return func(exc)
        raise exc


# --- file helpers shared by routers -----------------------------------------

def store_for(path: Path) -> Tuple[ArtifactStore, str]:
    """Store rooted at the parent of `path`, and the name of `path` inside it."""
    path = Path(path)
    return ArtifactStore(path.parent), path.name


def read_table(path: Path) -> np.ndarray:
    """
    Read a numeric CSV, with or without a header row.

    Returns:
        np.ndarray: 2D float array
    """
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"File not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    try:
        [float(v) for v in first.split(",") if v]
        has_header = False
    except ValueError:
        has_header = True
    store, name = store_for(path)
    data, _ = store.load_csv(name, header=has_header)
    return data


def write_table(path: Path, array: np.ndarray, header: Sequence[str]) -> Path:
    store, name = store_for(path)
    return store.save_csv(name, array, header)


def parse_floats(text: str) -> Tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"Expected a comma-separated list of numbers, got {text!r}")


def observable_from(model: ModelId, species: Optional[str], times: Optional[str]) -> Optional[Observable]:
    """Observable from `--species a,b` and `--times`; None keeps the catalog default."""
    if species is None and times is None:
        return None
    default = get_spec(model).observable
    indices = (tuple(resolve_state_index(model, s) for s in species.split(",")) if species
               else default.indices)
    return Observable(indices, parse_times(times) if times else default.times)


def integrator_args() -> List[Tuple[Tuple[str, ...], Dict[str, Any]]]:
    """Shared integrator flags."""
    return [
        arg("--method", default="RK45", help="scipy integrator"),
        arg("--rtol", type=float, default=DEFAULT_RTOL),
        arg("--atol", type=float, default=DEFAULT_ATOL),
        arg("--max-steps", type=int, default=DEFAULT_MAX_STEPS),
        arg("--batch-size", type=int, default=256, help="Rows integrated as one stacked system"),
    ]


def integrator_kwargs(args) -> Dict[str, Any]:
    return {"method": args.method, "rtol": args.rtol, "atol": args.atol,
            "max_steps": args.max_steps, "batch_size": args.batch_size}

import os

import rich.console

console = rich.console.Console(stderr=True, highlight=False)

LEVEL_COLORS = {
    "info": "green",
    "skip": "blue",
    "warn": "yellow",
    "error": "red",
}


def quiet() -> bool:
    return os.getenv("T2S_QUIET", "") not in ("", "0")


def log(message: str, level: str = "info"):
    if quiet() and level != "error":
        return
    color = LEVEL_COLORS.get(level, "white")
    console.print(f"[{color}]{message}")


def env_int(name: str):
    raw = os.getenv(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        log(f"Ignoring non-integer {name}={raw!r}", level="warn")
        return None

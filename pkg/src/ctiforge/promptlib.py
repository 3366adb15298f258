"""Prompt templates shipped as package data.

Templates use string.Template placeholders so a literal "$" in threat
text never collides with substitution (substitute() only touches known
names via safe mapping at call sites).
"""

from __future__ import annotations

import string
from functools import lru_cache
from importlib import resources


@lru_cache(maxsize=None)
def prompt_template(name: str) -> string.Template:
    text = resources.files("ctiforge").joinpath("prompts", f"{name}.txt").read_text("utf-8")
    return string.Template(text)


@lru_cache(maxsize=None)
def system_text() -> str:
    return resources.files("ctiforge").joinpath("prompts", "system.txt").read_text("utf-8").strip()


def render(name: str, **values: str) -> str:
    return prompt_template(name).substitute(**values)

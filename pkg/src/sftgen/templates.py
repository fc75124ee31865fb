"""Prompt templates: external text assets with {placeholder} substitution.

A template file holds the system prompt, a line containing only ``---``, and
the user-prompt body. Placeholders use ``{name}`` and only names supplied at
render time are substituted; anything else is left verbatim so literal braces
in prompt text survive.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import TemplateError
from .gateway import ChatRequest

# Per-role decoding defaults; all overridable through run config.
DEFAULT_TEMPERATURES = {
    "expansion": 1.0,
    "rewrite": 0.2,
    "answer": 0.3,
    "edit": 0.2,
    "rank": 0.0,
    "plain": 0.3,
}
DEFAULT_MAX_TOKENS = {
    "expansion": 1024,
    "rewrite": 256,
    "answer": 2048,
    "edit": 2048,
    "rank": 128,
    "plain": 1024,
}

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")
_SECTION_SEPARATOR = "---"


def render(template_text: str, values: Mapping[str, object]) -> str:
    return _PLACEHOLDER_RE.sub(
        lambda m: str(values[m.group(1)]) if m.group(1) in values else m.group(0),
        template_text,
    )


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    system: str
    user: str
    temperature: float
    max_output_tokens: int

    def build_request(
        self,
        values: Mapping[str, object],
        *,
        temperature: float | None = None,
        max_output_tokens: int | None = None,
        seed_hint: int | None = None,
    ) -> ChatRequest:
        return ChatRequest(
            template_id=self.template_id,
            system_prompt=render(self.system, values),
            user_prompt=render(self.user, values),
            temperature=self.temperature if temperature is None else temperature,
            max_output_tokens=self.max_output_tokens if max_output_tokens is None else max_output_tokens,
            seed_hint=seed_hint,
        )


def _parse_template(template_id: str, raw: str, temperature: float, max_tokens: int) -> PromptTemplate:
    lines = raw.split("\n")
    try:
        split_at = next(i for i, line in enumerate(lines) if line.strip() == _SECTION_SEPARATOR)
    except StopIteration:
        raise TemplateError(f"template {template_id!r} lacks the '---' system/user separator") from None
    system = "\n".join(lines[:split_at]).strip()
    user = "\n".join(lines[split_at + 1 :]).strip()
    if not system or not user:
        raise TemplateError(f"template {template_id!r} has an empty system or user section")
    return PromptTemplate(
        template_id=template_id,
        system=system,
        user=user,
        temperature=temperature,
        max_output_tokens=max_tokens,
    )


class TemplateStore:
    """Resolves template ids to prompt assets.

    Lookup order: the user-supplied directory (if any), then the package's
    bundled ``prompts/`` assets. Temperature/token overrides come from run
    config and win over the built-in defaults.
    """

    def __init__(
        self,
        user_dir: str | Path | None = None,
        temperatures: Mapping[str, float] | None = None,
        max_tokens: Mapping[str, int] | None = None,
    ):
        self._user_dir = Path(user_dir) if user_dir else None
        self._temperatures = dict(DEFAULT_TEMPERATURES)
        self._temperatures.update(temperatures or {})
        self._max_tokens = dict(DEFAULT_MAX_TOKENS)
        self._max_tokens.update(max_tokens or {})
        self._cache: dict[str, PromptTemplate] = {}

    def get(self, template_id: str) -> PromptTemplate:
        if template_id in self._cache:
            return self._cache[template_id]
        raw = self._read(template_id)
        template = _parse_template(
            template_id,
            raw,
            self._temperatures.get(template_id, 0.3),
            self._max_tokens.get(template_id, 1024),
        )
        self._cache[template_id] = template
        return template

    def _read(self, template_id: str) -> str:
        if self._user_dir is not None:
            candidate = self._user_dir / f"{template_id}.txt"
            if candidate.is_file():
                return candidate.read_text(encoding="utf-8")
        packaged = resources.files("sftgen").joinpath(f"prompts/{template_id}.txt")
        try:
            return packaged.read_text(encoding="utf-8")
        except (FileNotFoundError, ModuleNotFoundError):
            raise TemplateError(f"no template found for id {template_id!r}") from None

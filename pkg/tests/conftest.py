from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sftgen.templates import TemplateStore


@pytest.fixture(scope="session")
def template_store() -> TemplateStore:
    return TemplateStore()
